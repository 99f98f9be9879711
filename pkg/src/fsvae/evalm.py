"""Evaluation: reconstruction loss, autoencoder-feature Frechet distance,
operation counting, firing-rate analysis, and parameter sweeps.

Op-counting conventions (the reference comparison leaves these unstated, so
they are fixed here and printed in every report header):
  * ANN mode: each conv/FC MAC is 1 addition + 1 multiplication; bias and
    normalization are folded into the weights and not counted separately.
  * SNN mode: synaptic accumulations are additions only, scaled by the
    presynaptic firing rate and the number of timesteps; the direct-encoded
    input is treated as a dense spike train (rate 1); membrane decay is
    1 multiplication + 1 addition per neuron per timestep; spike-to-image
    decoding is 1 multiplication + 1 addition per output pixel per timestep.
  * SNN multiplications are therefore independent of firing rates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .layers import Conv2d, ConvTranspose2d, Linear, Relu, Tanh, collect_params
from .model import Fsvae, ModelConfig
from .optim import AdamW
from .rng import RngStream
from .train import TrainConfig, fit

CONVENTION_NOTE = ("conventions: tdBN and bias folded into weights; "
                   "direct-encoded input counted at rate 1; membrane decay "
                   "1 mul + 1 add per neuron per timestep")


# ---- Frechet distance ------------------------------------------------------

def _psd_sqrt(mat: np.ndarray, label: str) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; eigenvalues below
    -1e-6 are treated as failure, small negatives are clamped to 0."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6:
        raise ValueError(f"{label}: matrix is not PSD (min eigenvalue {vals.min():.3e}, "
                         f"condition {vals.max() / max(abs(vals.min()), 1e-30):.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_real: np.ndarray, feats_gen: np.ndarray) -> float:
    """||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2})."""
    for name, f in (("real", feats_real), ("generated", feats_gen)):
        if f.shape[0] < 2:
            raise ValueError(f"need >= 2 {name} samples, got {f.shape[0]}")
    fr = np.asarray(feats_real, dtype=np.float64)
    fg = np.asarray(feats_gen, dtype=np.float64)
    mu_r, mu_g = fr.mean(axis=0), fg.mean(axis=0)
    s_r = np.atleast_2d(np.cov(fr, rowvar=False))
    s_g = np.atleast_2d(np.cov(fg, rowvar=False))
    # tr sqrtm(S_r S_g) computed symmetrically: sqrt(A) S_g sqrt(A), A = S_r
    a = _psd_sqrt(s_r, "real covariance")
    middle = _psd_sqrt(a @ s_g @ a, "covariance product")
    d = float(np.sum((mu_r - mu_g) ** 2) + np.trace(s_r) + np.trace(s_g)
              - 2.0 * np.trace(middle))
    return max(d, 0.0)


# ---- conventional eval autoencoder ----------------------------------------

class EvalAutoencoder:
    """Small non-spiking conv autoencoder whose latent space provides the
    features for the Frechet distance.  Trained once per dataset."""

    def __init__(self, resolution: int = 32, latent: int = 64, seed: int = 1234):
        rng = RngStream(seed).child(5)
        self.resolution = resolution
        self.latent = latent
        fs = resolution // 8
        self.fs = fs
        self.enc = [Conv2d(1, 16, rng.child(1)), Relu(),
                    Conv2d(16, 32, rng.child(2)), Relu(),
                    Conv2d(32, 64, rng.child(3)), Relu()]
        self.to_latent = Linear(64 * fs * fs, latent, rng.child(4))
        self.from_latent = Linear(latent, 64 * fs * fs, rng.child(5))
        self.dec = [Relu(),
                    ConvTranspose2d(64, 32, rng.child(6)), Relu(),
                    ConvTranspose2d(32, 16, rng.child(7)), Relu(),
                    ConvTranspose2d(16, 1, rng.child(8)), Tanh()]

    def _layers(self):
        return self.enc + [self.to_latent, self.from_latent] + self.dec

    def params(self):
        return collect_params({f"l{i}": l for i, l in enumerate(self._layers())})

    def encode(self, images: np.ndarray) -> np.ndarray:
        x = images
        for layer in self.enc:
            x = layer.forward(x, training=False)
        z = self.to_latent.forward(x.reshape(len(images), -1), training=False)
        for layer in self._layers():
            layer.clear_saved()
        return z

    def _forward(self, x):
        for layer in self.enc:
            x = layer.forward(x)
        z = self.to_latent.forward(x.reshape(x.shape[0], -1))
        y = self.from_latent.forward(z)
        y = y.reshape(x.shape[0], 64, self.fs, self.fs)
        for layer in self.dec:
            y = layer.forward(y)
        return y

    def _backward(self, g):
        for layer in reversed(self.dec):
            g = layer.backward(g)
        g = self.from_latent.backward(g.reshape(g.shape[0], -1))
        g = self.to_latent.backward(g)
        g = g.reshape(g.shape[0], 64, self.fs, self.fs)
        for layer in reversed(self.enc):
            g = layer.backward(g)

    def train(self, images: np.ndarray, epochs: int = 20, batch_size: int = 100,
              lr: float = 1e-3, seed: int = 1234) -> float:
        """MSE training; returns the final epoch's mean loss."""
        params = self.params()
        opt = AdamW(params, lr=lr, weight_decay=0.0)
        rng = RngStream(seed).child(6)
        last = float("nan")
        for epoch in range(epochs):
            order = rng.child(epoch).shuffle_index(len(images))
            losses = []
            for start in range(0, len(images), batch_size):
                x = images[order[start:start + batch_size]]
                for p in params.values():
                    p.grad[...] = 0.0
                y = self._forward(x)
                losses.append(float(np.mean((y - x) ** 2)))
                self._backward((2.0 / x.size) * (y - x))
                opt.step()
            last = float(np.mean(losses))
        return last


def reconstruction_loss(model: Fsvae, eval_images: np.ndarray, rng: RngStream,
                        batch_size: int = 100) -> float:
    """Mean pixel MSE of eval-mode reconstructions over an evaluation set."""
    if len(eval_images) == 0:
        raise ValueError("reconstruction_loss needs a non-empty evaluation set")
    total, count = 0.0, 0
    for bi, start in enumerate(range(0, len(eval_images), batch_size)):
        x = eval_images[start:start + batch_size]
        x_hat, _ = model.reconstruct(x, rng.child(bi))
        total += float(np.sum((x - x_hat) ** 2))
        count += x.size
    return total / count


# ---- op counting -----------------------------------------------------------

@dataclass
class OpCountRow:
    name: str
    adds: float
    muls: float


@dataclass
class OpCountReport:
    mode: str
    timesteps: int
    rows: list[OpCountRow] = field(default_factory=list)
    note: str = CONVENTION_NOTE

    @property
    def total_adds(self) -> float:
        return sum(r.adds for r in self.rows)

    @property
    def total_muls(self) -> float:
        return sum(r.muls for r in self.rows)

    def as_text(self) -> str:
        lines = [f"# mode={self.mode} timesteps={self.timesteps}",
                 f"# {self.note}",
                 f"{'layer':<24}{'additions':>16}{'multiplications':>18}"]
        for r in self.rows:
            lines.append(f"{r.name:<24}{r.adds:>16.3e}{r.muls:>18.3e}")
        lines.append(f"{'TOTAL':<24}{self.total_adds:>16.3e}{self.total_muls:>18.3e}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["layer,adds,muls"]
        for r in self.rows:
            lines.append(f"{r.name},{r.adds},{r.muls}")
        lines.append(f"TOTAL,{self.total_adds},{self.total_muls}")
        return "\n".join(lines)


def count_ops(graph: list[dict], mode: str, firing_rates: dict[str, float] | None,
              timesteps: int) -> OpCountReport:
    """Additions/multiplications to infer one image, per the module header's
    conventions.  graph comes from Fsvae.layer_graph()."""
    if mode not in ("ANN", "SNN"):
        raise ValueError(f"mode must be 'ANN' or 'SNN', got {mode!r}")
    report = OpCountReport(mode=mode, timesteps=timesteps if mode == "SNN" else 1)
    rates = dict(firing_rates or {})
    rates.setdefault("input", 1.0)
    for entry in graph:
        name, kind = entry["name"], entry["kind"]
        macs = entry["fan_in"] * entry["out_units"]
        units = entry["out_units"]
        if kind == "accumulator":
            if mode == "SNN":
                report.rows.append(OpCountRow(name, units * timesteps, units * timesteps))
            else:
                report.rows.append(OpCountRow(name, 0.0, 0.0))
            continue
        if mode == "ANN":
            report.rows.append(OpCountRow(name, macs, macs))
        else:
            key = entry["in_rate_key"]
            if key not in rates:
                raise ValueError(f"no firing rate for '{key}' (layer '{name}'); "
                                 "graph and measured rates do not match")
            rate = rates[key]
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"firing rate for '{key}' out of [0,1]: {rate}")
            synaptic = macs * rate * timesteps
            membrane = units * timesteps
            report.rows.append(OpCountRow(name, synaptic + membrane, membrane))
    return report


# ---- firing rates ----------------------------------------------------------

@dataclass
class FiringRateReport:
    rates: dict[str, float]

    def as_csv(self) -> str:
        lines = ["layer,rate"]
        for name, rate in self.rates.items():
            lines.append(f"{name},{rate:.6f}")
        return "\n".join(lines)


def firing_rate_report(model: Fsvae, eval_images: np.ndarray, rng: RngStream,
                       batch_size: int = 100) -> FiringRateReport:
    """Mean spike probability per layer over neurons, timesteps and samples.

    The encoder/posterior/decoder are measured on eval-mode reconstruction
    passes; the prior chain is measured on a generation pass of the same
    size (it never runs during reconstruction)."""
    model.reset_rate_stats()
    z_sum, z_count = 0.0, 0
    for bi, start in enumerate(range(0, len(eval_images), batch_size)):
        x = eval_images[start:start + batch_size]
        _, record = model.reconstruct(x, rng.child(bi))
        z_sum += float(record.z.sum())
        z_count += record.z.size
    n_gen = max(min(len(eval_images), batch_size), 1)
    _, prior_record = model.generate(n_gen, rng.child(999))
    rates = model.firing_rates()
    z_rate = z_sum / z_count if z_count else 0.0
    rates["latent_z"] = z_rate
    rates["input"] = 1.0
    rates["posterior.input"] = (z_rate + rates["encoder.fc"]) / 2.0
    rates["prior.input"] = float(prior_record.z.mean())
    for name, rate in rates.items():
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"firing rate out of [0,1] for {name}: {rate}")
    return FiringRateReport(rates=rates)


# ---- sweep -----------------------------------------------------------------

def sweep(base_model_cfg: ModelConfig, base_train_cfg: TrainConfig,
          train_images: np.ndarray, eval_images: np.ndarray,
          grid: list[tuple[str, int]], out_dir: str,
          frechet_samples: int = 1000, ae_epochs: int = 5) -> list[dict]:
    """Train/evaluate one model per (param, value) grid point.

    param is 'timesteps' or 'k'.  Failed points are recorded with NaNs and a
    note; the sweep continues.  Returns rows for the `param,value,frechet,
    recon` CSV.
    """
    import os

    ae = EvalAutoencoder(resolution=base_model_cfg.resolution,
                         seed=base_train_cfg.seed + 999)
    ae.train(train_images, epochs=ae_epochs, batch_size=min(100, len(train_images)),
             seed=base_train_cfg.seed + 999)
    n_real = min(frechet_samples, len(eval_images))
    feats_real = ae.encode(eval_images[:n_real])

    rows = []
    for param, value in grid:
        if param not in ("timesteps", "k"):
            raise ValueError(f"sweep parameter must be 'timesteps' or 'k', got {param!r}")
        point_dir = os.path.join(out_dir, f"{param}_{value}")
        try:
            mcfg = replace(base_model_cfg, **{param: value})
            model = Fsvae(mcfg, RngStream(base_train_cfg.seed).child(11))
            fit(model, train_images, base_train_cfg, point_dir)
            eval_rng = RngStream(base_train_cfg.seed).child(12)
            recon = reconstruction_loss(model, eval_images, eval_rng.child(1))
            gen, _ = model.generate(n_real, eval_rng.child(2))
            fd = frechet_distance(feats_real, ae.encode(gen))
            rows.append({"param": param, "value": value, "frechet": fd,
                         "recon": recon, "note": ""})
        except Exception as e:  # record and continue
            rows.append({"param": param, "value": value, "frechet": float("nan"),
                         "recon": float("nan"), "note": str(e)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = ["param,value,frechet,recon"]
    for r in rows:
        lines.append(f"{r['param']},{r['value']},{r['frechet']},{r['recon']}")
    return "\n".join(lines)
