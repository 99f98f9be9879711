"""Fully spiking VAE: encoder, autoregressive latent sampler, decoder, losses.

The decoder's output layer never fires; its membrane potential accumulates
the output spikes as u_T = sum_t tau_out^(T-t) * xhat_t and the image is
tanh(u_T).  Training minimizes pixel MSE plus a distance between posterior
and prior Bernoulli parameters: a PSP-kernel MMD by default, with plain MMD
(tau_syn -> 1 passthrough) and an epsilon-guarded Bernoulli KL divergence as
ablation flavors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .latent import (LatentConfig, SamplerNet, posterior_step, prior_step,
                     sample_posterior_train, sample_prior_generate,
                     scatter_selected_grad, scheduled_mix, LatentSampleRecord)
from .layers import Param
from .rng import RngStream
from .snn import LifConfig, SpikingConv, SpikingDeconv, SpikingLinear, psp_sequence

LOSS_FLAVORS = ("mmd-psp", "mmd", "kld")


@dataclass
class ModelConfig:
    in_channels: int = 1
    resolution: int = 32
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    latent_channels: int = 128
    k: int = 20
    timesteps: int = 16
    tau_decay: float = 0.25
    v_th: float = 0.5
    surrogate_width: float = 1.0
    tau_out: float = 0.8
    tau_syn: float = 2.0
    loss_flavor: str = "mmd-psp"
    posterior_hidden: int = 256
    prior_hidden: int = 128
    straight_through: bool = True

    def __post_init__(self):
        if isinstance(self.encoder_channels, list):
            self.encoder_channels = tuple(self.encoder_channels)
        if self.loss_flavor not in LOSS_FLAVORS:
            raise ValueError(f"loss_flavor must be one of {LOSS_FLAVORS}, got {self.loss_flavor!r}")
        depth = len(self.encoder_channels)
        if self.resolution % (2 ** depth) != 0:
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2^{depth} conv stack")
        LatentConfig(self.latent_channels, self.k, self.timesteps)  # validates

    @property
    def latent(self) -> LatentConfig:
        return LatentConfig(self.latent_channels, self.k, self.timesteps)

    @property
    def lif(self) -> LifConfig:
        return LifConfig(self.tau_decay, self.v_th, self.surrogate_width)

    @property
    def final_spatial(self) -> int:
        return self.resolution // (2 ** len(self.encoder_channels))


def direct_encode(images: np.ndarray, timesteps: int) -> np.ndarray:
    """Present the same real-valued image as input current at every timestep."""
    if images.min() < -1.0 or images.max() > 1.0:
        raise ValueError("direct_encode expects images normalized to [-1, 1]")
    return np.broadcast_to(images, (timesteps,) + images.shape).copy()


def mmd_loss(pi_q: np.ndarray, pi_p: np.ndarray, tau_syn: float):
    """Sum over t of squared PSP-space distance between pi_q and pi_p.

    Returns (loss, grad_pi_q, grad_pi_p); arrays are (T, ...) with time first.
    """
    T.check_same_shape(pi_q, pi_p, "pi_q and pi_p")
    for name, pi in (("pi_q", pi_q), ("pi_p", pi_p)):
        if pi.min() < 0.0 or pi.max() > 1.0:
            raise ValueError(f"{name} has values outside [0, 1]")
    d = psp_sequence(pi_q, tau_syn) - psp_sequence(pi_p, tau_syn)
    loss = float(np.sum(d * d))
    inv = 1.0 / tau_syn
    decay = 1.0 - inv
    g_q = np.empty_like(d)
    g_psp = np.zeros_like(d[0])
    for t in range(d.shape[0] - 1, -1, -1):
        g_psp = 2.0 * d[t] + decay * g_psp
        g_q[t] = inv * g_psp
    return loss, g_q, -g_q


def kld_loss(pi_q: np.ndarray, pi_p: np.ndarray, epsilon: float = 0.01):
    """Bernoulli KL(q||p) summed over time and channels, with probabilities
    clamped to [epsilon, 1-epsilon] to avoid divergence."""
    T.check_same_shape(pi_q, pi_p, "pi_q and pi_p")
    q = np.clip(pi_q, epsilon, 1.0 - epsilon)
    p = np.clip(pi_p, epsilon, 1.0 - epsilon)
    loss = float(np.sum(q * np.log(q / p) + (1.0 - q) * np.log((1.0 - q) / (1.0 - p))))
    mask_q = ((pi_q > epsilon) & (pi_q < 1.0 - epsilon)).astype(pi_q.dtype)
    mask_p = ((pi_p > epsilon) & (pi_p < 1.0 - epsilon)).astype(pi_p.dtype)
    g_q = (np.log(q / p) - np.log((1.0 - q) / (1.0 - p))) * mask_q
    g_p = (-q / p + (1.0 - q) / (1.0 - p)) * mask_p
    return loss, g_q, g_p


def distance_loss(pi_q: np.ndarray, pi_p: np.ndarray, flavor: str, tau_syn: float):
    if flavor == "mmd-psp":
        return mmd_loss(pi_q, pi_p, tau_syn)
    if flavor == "mmd":
        return mmd_loss(pi_q, pi_p, 1.0)
    if flavor == "kld":
        return kld_loss(pi_q, pi_p)
    raise ValueError(f"unknown loss flavor {flavor!r}")


def elbo_loss(x: np.ndarray, x_hat: np.ndarray, pi_q: np.ndarray,
              pi_p: np.ndarray, flavor: str, tau_syn: float):
    """Total loss and its components: (total, recon, dist).

    Reconstruction is MSE averaged over batch and pixels; the distance term
    is summed over time and channels and averaged over batch.
    """
    T.check_same_shape(x, x_hat, "image and reconstruction")
    batch = x.shape[0] if x.ndim > 3 else 1
    recon = float(np.mean((x - x_hat) ** 2))
    dist, _, _ = distance_loss(pi_q, pi_p, flavor, tau_syn)
    dist /= batch
    return recon + dist, recon, dist


class OutputAccumulator:
    """Non-firing output layer: leaky sum of decoder spikes, read at time T."""

    def __init__(self, tau_out: float):
        self.tau_out = tau_out
        self._saved = None

    def forward(self, xhat_seq: np.ndarray) -> np.ndarray:
        t_steps = xhat_seq.shape[0]
        u = np.zeros_like(xhat_seq[0])
        for t in range(t_steps):
            u = self.tau_out * u + xhat_seq[t]
        out = np.tanh(u)
        self._saved = (out, t_steps)
        return out

    def backward(self, g_img: np.ndarray) -> np.ndarray:
        out, t_steps = self._saved
        gu = g_img * (1.0 - out * out)
        weights = self.tau_out ** np.arange(t_steps - 1, -1, -1, dtype=gu.dtype)
        return weights[(slice(None),) + (None,) * gu.ndim] * gu[None]


class Fsvae:
    """The full model.  All forward passes are deterministic given an
    explicit RngStream; NeuronStates live inside the layers and are reset at
    every sequence start."""

    def __init__(self, cfg: ModelConfig, init_rng: RngStream):
        self.cfg = cfg
        lif = cfg.lif
        widths = cfg.encoder_channels
        fs = cfg.final_spatial
        c_lat = cfg.latent_channels

        enc_rng = init_rng.child(1)
        self.encoder_convs = []
        prev = cfg.in_channels
        for i, w in enumerate(widths):
            self.encoder_convs.append(SpikingConv(prev, w, enc_rng.child(i), lif))
            prev = w
        self.encoder_fc = SpikingLinear(widths[-1] * fs * fs, c_lat, enc_rng.child(99), lif)

        self.posterior = SamplerNet(2 * c_lat, cfg.posterior_hidden, cfg.latent,
                                    init_rng.child(2), lif)
        self.prior = SamplerNet(c_lat, cfg.prior_hidden, cfg.latent,
                                init_rng.child(3), lif)

        dec_rng = init_rng.child(4)
        self.decoder_fc = SpikingLinear(c_lat, widths[-1] * fs * fs, dec_rng.child(99), lif)
        self.decoder_deconvs = []
        rev = list(widths[::-1]) + [cfg.in_channels]
        for i in range(len(widths)):
            self.decoder_deconvs.append(
                SpikingDeconv(rev[i], rev[i + 1], dec_rng.child(i), lif))
        self.accumulator = OutputAccumulator(cfg.tau_out)

    # ---- layer bookkeeping -------------------------------------------------

    def spiking_layers(self) -> dict:
        out = {}
        for i, layer in enumerate(self.encoder_convs, 1):
            out[f"encoder.conv{i}"] = layer
        out["encoder.fc"] = self.encoder_fc
        for i, layer in enumerate(self.posterior.layers, 1):
            out[f"posterior.fc{i}"] = layer
        for i, layer in enumerate(self.prior.layers, 1):
            out[f"prior.fc{i}"] = layer
        out["decoder.fc"] = self.decoder_fc
        for i, layer in enumerate(self.decoder_deconvs, 1):
            out[f"decoder.deconv{i}"] = layer
        return out

    def params(self) -> dict[str, Param]:
        out = {}
        for lname, layer in self.spiking_layers().items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def zero_grads(self):
        for layer in self.spiking_layers().values():
            layer.zero_grads()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: p.value for k, p in self.params().items()}
        for lname, layer in self.spiking_layers().items():
            if layer.bn is not None:
                for bname, buf in layer.bn.buffers().items():
                    out[f"{lname}.bn.{bname}"] = buf
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        mine = self.state_tensors()
        missing = sorted(set(mine) - set(tensors))
        extra = sorted(set(tensors) - set(mine))
        bad_shape = sorted(k for k in mine if k in tensors
                           and tensors[k].shape != mine[k].shape)
        if missing or extra or bad_shape:
            raise ValueError(
                "checkpoint does not match model: "
                f"missing={missing} unexpected={extra} shape_mismatch={bad_shape}")
        for k, p in self.params().items():
            p.value[...] = tensors[k]
        for lname, layer in self.spiking_layers().items():
            if layer.bn is not None:
                layer.bn.load_buffers({
                    "running_mean": tensors[f"{lname}.bn.running_mean"],
                    "running_var": tensors[f"{lname}.bn.running_var"]})

    def clear_saved(self):
        for layer in self.spiking_layers().values():
            layer.clear_saved()

    def reset_rate_stats(self):
        for layer in self.spiking_layers().values():
            layer.lif.reset_rate_stats()

    def firing_rates(self) -> dict[str, float]:
        out = {}
        for name, layer in self.spiking_layers().items():
            lif = layer.lif
            out[name] = lif.rate_sum / lif.rate_count if lif.rate_count else 0.0
        return out

    # ---- forward pieces ----------------------------------------------------

    def encode(self, images: np.ndarray, training: bool) -> np.ndarray:
        """Images (B,C,H,W) in [-1,1] -> encoder spike trains (T,B,C_latent)."""
        s = direct_encode(images, self.cfg.timesteps)
        for conv in self.encoder_convs:
            s = conv.forward(s, training)
        t_steps, batch = s.shape[:2]
        s = s.reshape(t_steps, batch, -1)
        return self.encoder_fc.forward(s, training)

    def encode_backward(self, g_xe: np.ndarray) -> None:
        g = self.encoder_fc.backward(g_xe)
        fs = self.cfg.final_spatial
        t_steps, batch = g.shape[:2]
        g = g.reshape(t_steps, batch, self.cfg.encoder_channels[-1], fs, fs)
        for conv in reversed(self.encoder_convs):
            g = conv.backward(g)

    def decode(self, z_seq: np.ndarray, training: bool) -> np.ndarray:
        """Latent spikes (T,B,C) -> reconstructed images in (-1,1)."""
        s = self.decoder_fc.forward(z_seq, training)
        fs = self.cfg.final_spatial
        t_steps, batch = s.shape[:2]
        s = s.reshape(t_steps, batch, self.cfg.encoder_channels[-1], fs, fs)
        for deconv in self.decoder_deconvs:
            s = deconv.forward(s, training)
        return self.accumulator.forward(s)

    def decode_backward(self, g_img: np.ndarray) -> np.ndarray:
        g = self.accumulator.backward(g_img)
        for deconv in reversed(self.decoder_deconvs):
            g = deconv.backward(g)
        t_steps, batch = g.shape[:2]
        g = g.reshape(t_steps, batch, -1)
        return self.decoder_fc.backward(g)

    # ---- training ----------------------------------------------------------

    def training_step(self, images: np.ndarray, rng: RngStream, p_mix: float):
        """Full forward + backward for one batch.  Leaves gradients in the
        parameters and returns the loss components."""
        cfg = self.cfg
        k = cfg.k
        t_steps = cfg.timesteps
        batch = images.shape[0]

        x_e = self.encode(images, training=True)

        rng_q = rng.child(1)
        rng_p = rng.child(2)
        rng_mix = rng.child(3)

        self.posterior.reset_states()
        self.prior.reset_states()
        z_q_prev = np.zeros((batch, cfg.latent_channels), dtype=x_e.dtype)
        z_p_prev = np.zeros_like(z_q_prev)
        zq, zetaq, piq, idxq = [], [], [], []
        zp, zetap, pip_, idxp = [], [], [], []
        masks = []
        for t in range(t_steps):
            z_q_t, zeta_q, pi_q, idx_q = posterior_step(
                self.posterior, z_q_prev, x_e[t], rng_q, training=True)
            prior_in, mask = scheduled_mix(z_q_prev, z_p_prev, p_mix, rng_mix)
            z_p_t, zeta_p, pi_p, idx_p = prior_step(
                self.prior, prior_in, rng_p, training=True)
            zq.append(z_q_t); zetaq.append(zeta_q); piq.append(pi_q); idxq.append(idx_q)
            zp.append(z_p_t); zetap.append(zeta_p); pip_.append(pi_p); idxp.append(idx_p)
            masks.append(mask)
            z_q_prev, z_p_prev = z_q_t, z_p_t

        z_q_seq = np.stack(zq)
        pi_q = np.stack(piq)
        pi_p = np.stack(pip_)

        x_hat = self.decode(z_q_seq, training=True)

        total, recon, dist = elbo_loss(images, x_hat, pi_q, pi_p,
                                       cfg.loss_flavor, cfg.tau_syn)
        if not np.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss: total={total} recon={recon} dist={dist}")

        # --- backward ---
        g_img = (2.0 / images.size) * (x_hat - images)
        g_z_q_dec = self.decode_backward(g_img)  # (T,B,C)

        _, g_pi_q, g_pi_p = distance_loss(pi_q, pi_p, cfg.loss_flavor, cfg.tau_syn)
        g_pi_q /= batch
        g_pi_p /= batch

        self.posterior.begin_backward()
        self.prior.begin_backward()
        g_xe = np.zeros_like(x_e)
        gz_q_next = np.zeros((batch, cfg.latent_channels), dtype=x_e.dtype)
        gz_p_next = np.zeros_like(gz_q_next)
        st = cfg.straight_through
        for t in range(t_steps - 1, -1, -1):
            # gradient arriving at z_p_t / z_q_t from step t+1
            gz_p_t = gz_p_next
            gz_q_t = gz_q_next + g_z_q_dec[t]

            g_zeta_p = np.repeat(g_pi_p[t] / k, k, axis=-1)
            if st:
                g_zeta_p = g_zeta_p + scatter_selected_grad(gz_p_t, idxp[t], k)
            g_in_p = self.prior.step_backward(g_zeta_p)
            # prior input at t was z_{q,t-1} or z_{p,t-1} per mask
            gz_p_next = masks[t] * g_in_p
            gz_q_from_p = (1.0 - masks[t]) * g_in_p

            g_zeta_q = np.repeat(g_pi_q[t] / k, k, axis=-1)
            if st:
                g_zeta_q = g_zeta_q + scatter_selected_grad(gz_q_t, idxq[t], k)
            g_in_q = self.posterior.step_backward(g_zeta_q)
            gz_q_next = g_in_q[:, :cfg.latent_channels] + gz_q_from_p
            g_xe[t] = g_in_q[:, cfg.latent_channels:]

        self.encode_backward(g_xe)

        return {"loss": total, "recon": recon, "dist": dist,
                "fire_rate_post": float(np.mean(pi_q)),
                "fire_rate_prior": float(np.mean(pi_p))}

    # ---- inference ---------------------------------------------------------

    def generate(self, n: int, rng: RngStream):
        """Sample n images from the prior chain.  Returns (images, record)."""
        record = sample_prior_generate(self.prior, self.cfg.timesteps, n,
                                       rng, training=False)
        images = self.decode(record.z, training=False)
        self.clear_saved()
        return images, record

    def reconstruct(self, images: np.ndarray, rng: RngStream):
        """Encode + posterior-sample + decode in eval mode."""
        x_e = self.encode(images, training=False)
        record = sample_posterior_train(self.posterior, x_e, rng, training=False)
        out = self.decode(record.z, training=False)
        self.clear_saved()
        return out, record

    # ---- op-count graph ----------------------------------------------------

    def layer_graph(self) -> list[dict]:
        """Ordered layer description shared with the op counter."""
        cfg = self.cfg
        graph = []
        size = cfg.resolution
        prev_c = cfg.in_channels
        prev_key = "input"
        for i, w in enumerate(cfg.encoder_channels, 1):
            size //= 2
            name = f"encoder.conv{i}"
            graph.append(dict(name=name, kind="conv", fan_in=prev_c * 9,
                              out_units=w * size * size, in_rate_key=prev_key))
            prev_c, prev_key = w, name
        fs = cfg.final_spatial
        c_lat = cfg.latent_channels
        graph.append(dict(name="encoder.fc", kind="fc",
                          fan_in=cfg.encoder_channels[-1] * fs * fs,
                          out_units=c_lat, in_rate_key=prev_key))
        widths_q = [2 * c_lat, cfg.posterior_hidden, cfg.posterior_hidden, cfg.k * c_lat]
        prev_key = "posterior.input"
        for i in range(3):
            name = f"posterior.fc{i + 1}"
            graph.append(dict(name=name, kind="fc", fan_in=widths_q[i],
                              out_units=widths_q[i + 1], in_rate_key=prev_key))
            prev_key = name
        widths_p = [c_lat, cfg.prior_hidden, cfg.prior_hidden, cfg.k * c_lat]
        prev_key = "prior.input"
        for i in range(3):
            name = f"prior.fc{i + 1}"
            graph.append(dict(name=name, kind="fc", fan_in=widths_p[i],
                              out_units=widths_p[i + 1], in_rate_key=prev_key))
            prev_key = name
        graph.append(dict(name="decoder.fc", kind="fc", fan_in=c_lat,
                          out_units=cfg.encoder_channels[-1] * fs * fs,
                          in_rate_key="latent_z"))
        size = fs
        rev = list(cfg.encoder_channels[::-1]) + [cfg.in_channels]
        prev_key = "decoder.fc"
        for i in range(len(cfg.encoder_channels)):
            size *= 2
            name = f"decoder.deconv{i + 1}"
            graph.append(dict(name=name, kind="deconv", fan_in=rev[i] * 9,
                              out_units=rev[i + 1] * size * size, in_rate_key=prev_key))
            prev_key = name
        graph.append(dict(name="decoder.accumulate", kind="accumulator", fan_in=1,
                          out_units=cfg.in_channels * cfg.resolution ** 2,
                          in_rate_key=prev_key))
        return graph
