"""Autoregressive Bernoulli spike sampling.

The posterior network maps (z_{t-1}, encoder spikes at t) to a kC-wide spike
vector zeta_t; the prior maps z_{t-1} alone.  One of each k-block's elements
is selected uniformly at random per channel, which realizes a Bernoulli draw
with probability equal to the block mean pi.  Gradients reach the networks
through pi (a deterministic mean of zeta) and, optionally, straight-through
from the selected spike to its zeta element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bits import BitTensor
from .rng import RngStream
from .snn import LifConfig, SpikingLinear


@dataclass
class LatentConfig:
    channels: int = 128
    k: int = 20
    timesteps: int = 16

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")


@dataclass
class LatentSampleRecord:
    """Everything the loss and backward pass need from one sampled sequence."""
    z: np.ndarray            # (T, B, C) binary
    zeta: np.ndarray         # (T, B, kC) binary
    pi: np.ndarray           # (T, B, C) block means
    select_idx: np.ndarray   # (T, B, C) int, chosen offset within each block

    def z_bits(self) -> BitTensor:
        return BitTensor.from_array(self.z)

    def zeta_bits(self) -> BitTensor:
        return BitTensor.from_array(self.zeta)


class SamplerNet:
    """Three spiking FC layers producing kC-wide spike vectors per step."""

    def __init__(self, in_features: int, hidden: int, latent: LatentConfig,
                 rng: RngStream, lif_cfg: LifConfig):
        self.latent = latent
        out = latent.k * latent.channels
        self.fc1 = SpikingLinear(in_features, hidden, rng.child(1), lif_cfg)
        self.fc2 = SpikingLinear(hidden, hidden, rng.child(2), lif_cfg)
        self.fc3 = SpikingLinear(hidden, out, rng.child(3), lif_cfg)

    @property
    def layers(self):
        return [self.fc1, self.fc2, self.fc3]

    def reset_states(self):
        for layer in self.layers:
            layer.reset_state()

    def begin_backward(self):
        for layer in self.layers:
            layer.lif._carry = None

    def step(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.step(x, training)
        return x

    def step_backward(self, g_zeta: np.ndarray) -> np.ndarray:
        g = g_zeta
        for layer in reversed(self.layers):
            g = layer.step_backward(g)
        return g

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers, 1):
            for name, p in layer.params().items():
                out[f"fc{i}.{name}"] = p
        return out


def select_spikes(zeta: np.ndarray, k: int, rng: RngStream):
    """Random per-channel selection from each k-block.

    zeta: (B, kC).  Returns (z (B,C), pi (B,C), idx (B,C))."""
    b, kc = zeta.shape
    c = kc // k
    blocks = zeta.reshape(b, c, k)
    idx = rng.uniform_ints(k, (b, c))
    z = np.take_along_axis(blocks, idx[..., None], axis=2)[..., 0]
    pi = blocks.mean(axis=2)
    return z, pi, idx


def scatter_selected_grad(g_z: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """Straight-through: route each z gradient to its selected zeta element."""
    b, c = g_z.shape
    g_blocks = np.zeros((b, c, k), dtype=g_z.dtype)
    np.put_along_axis(g_blocks, idx[..., None], g_z[..., None], axis=2)
    return g_blocks.reshape(b, c * k)


def posterior_step(net: SamplerNet, z_prev: np.ndarray, x_e_t: np.ndarray,
                   rng: RngStream, training: bool = True):
    """One posterior timestep: (z_t, zeta_t, pi_t, idx_t)."""
    inp = np.concatenate([z_prev, x_e_t], axis=-1)
    zeta = net.step(inp, training)
    z, pi, idx = select_spikes(zeta, net.latent.k, rng)
    return z, zeta, pi, idx


def prior_step(net: SamplerNet, z_prev: np.ndarray, rng: RngStream,
               training: bool = True):
    """One prior timestep: (z_t, zeta_t, pi_t, idx_t)."""
    zeta = net.step(z_prev, training)
    z, pi, idx = select_spikes(zeta, net.latent.k, rng)
    return z, zeta, pi, idx


def _stack_record(zs, zetas, pis, idxs) -> LatentSampleRecord:
    return LatentSampleRecord(z=np.stack(zs), zeta=np.stack(zetas),
                              pi=np.stack(pis), select_idx=np.stack(idxs))


def sample_posterior_train(net: SamplerNet, x_e: np.ndarray, rng: RngStream,
                           training: bool = True) -> LatentSampleRecord:
    """Run the posterior chain over all T timesteps of encoder output x_e."""
    t_steps, batch, c = x_e.shape
    net.reset_states()
    z_prev = np.zeros((batch, net.latent.channels), dtype=x_e.dtype)
    zs, zetas, pis, idxs = [], [], [], []
    for t in range(t_steps):
        z_prev, zeta, pi, idx = posterior_step(net, z_prev, x_e[t], rng, training)
        zs.append(z_prev)
        zetas.append(zeta)
        pis.append(pi)
        idxs.append(idx)
    return _stack_record(zs, zetas, pis, idxs)


def sample_prior_generate(net: SamplerNet, timesteps: int, batch: int,
                          rng: RngStream, training: bool = False) -> LatentSampleRecord:
    """Autoregressive prior chain from z_0 = 0; z feeds back as next input."""
    net.reset_states()
    z_prev = np.zeros((batch, net.latent.channels), dtype=np.float32)
    zs, zetas, pis, idxs = [], [], [], []
    for _ in range(timesteps):
        z_prev, zeta, pi, idx = prior_step(net, z_prev, rng, training)
        zs.append(z_prev)
        zetas.append(zeta)
        pis.append(pi)
        idxs.append(idx)
    return _stack_record(zs, zetas, pis, idxs)


def scheduled_mix(z_q_t: np.ndarray, z_p_t: np.ndarray, p_mix: float,
                  rng: RngStream):
    """Pick z_p_t with probability p_mix, else z_q_t, independently per batch
    element.  Returns (mixed, mask) where mask is 1 where z_p was taken."""
    if not 0.0 <= p_mix <= 1.0:
        raise ValueError(f"p_mix must be in [0,1], got {p_mix}")
    batch = z_q_t.shape[0]
    mask = (rng.uniform((batch, 1)) < p_mix).astype(z_q_t.dtype)
    return mask * z_p_t + (1.0 - mask) * z_q_t, mask
