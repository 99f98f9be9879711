"""Training loop: batching, teacher forcing with scheduled sampling,
optimization, checkpointing, CSV logging."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import Fsvae, ModelConfig
from .optim import AdamW
from .rng import RngStream

LOG_FIELDS = ["epoch", "loss", "recon", "dist", "fire_rate_post",
              "fire_rate_prior", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 250
    schedule_ceiling: float = 0.3
    seed: int = 0
    subset: int = 0               # 0 = use the whole training set
    grad_clip: float = 5.0        # <= 0 disables clipping
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.schedule_ceiling <= 1.0:
            raise ValueError(
                f"schedule_ceiling must be in [0,1], got {self.schedule_ceiling}")


def mix_probability(epoch_index: int, cfg: TrainConfig) -> float:
    """Scheduled-sampling probability, linear from 0 to the ceiling."""
    if cfg.epochs <= 1:
        return 0.0
    return cfg.schedule_ceiling * epoch_index / (cfg.epochs - 1)


def train_epoch(model: Fsvae, images: np.ndarray, opt: AdamW, epoch_index: int,
                cfg: TrainConfig, root_rng: RngStream) -> dict:
    """One pass over the data.  Returns the epoch's TrainLog entry."""
    t0 = time.monotonic()
    epoch_rng = root_rng.child(epoch_index + 1)
    order = epoch_rng.child(0).shuffle_index(len(images))
    p_mix = mix_probability(epoch_index, cfg)
    sums = {k: 0.0 for k in ("loss", "recon", "dist", "fire_rate_post", "fire_rate_prior")}
    n_batches = 0
    for bi, start in enumerate(range(0, len(images), cfg.batch_size)):
        batch = images[order[start:start + cfg.batch_size]]
        model.zero_grads()
        try:
            stats = model.training_step(batch, epoch_rng.child(bi + 1), p_mix)
        except FloatingPointError as e:
            raise FloatingPointError(
                f"epoch {epoch_index} batch {bi} aborted: {e}") from e
        if cfg.grad_clip > 0:
            opt.clip_grads(cfg.grad_clip)
        opt.step()
        for k in sums:
            sums[k] += stats[k]
        n_batches += 1
    entry = {k: sums[k] / n_batches for k in sums}
    entry["epoch"] = epoch_index
    entry["seconds"] = time.monotonic() - t0
    return entry


def _write_log(log: list[dict], path: str):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in LOG_FIELDS})


def make_checkpoint(model: Fsvae, opt: AdamW, train_cfg: TrainConfig,
                    next_epoch: int) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_tensors().items()}
    tensors.update({f"opt.{k}": v for k, v in opt.state_tensors().items()})
    config = {"model": asdict(model.cfg), "train": asdict(train_cfg),
              "next_epoch": next_epoch}
    return Checkpoint(config=config, tensors=tensors)


def restore_model(ckpt: Checkpoint) -> Fsvae:
    """Build a model from a checkpoint's config snapshot and load its weights."""
    mcfg = ModelConfig(**ckpt.config["model"])
    model = Fsvae(mcfg, RngStream(0))
    model.load_state_tensors(
        {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")})
    return model


def fit(model: Fsvae, images: np.ndarray, cfg: TrainConfig, out_dir: str,
        resume_from: str | None = None, on_checkpoint=None):
    """Run the full training schedule.  Returns (final_ckpt_path, log)."""
    os.makedirs(out_dir, exist_ok=True)
    if cfg.subset:
        images = images[:cfg.subset]
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_tensors(
            {k[len("model."):]: v for k, v in ckpt.tensors.items()
             if k.startswith("model.")})
        opt.load_state_tensors(
            {k[len("opt."):]: v for k, v in ckpt.tensors.items()
             if k.startswith("opt.")})
        start_epoch = int(ckpt.config["next_epoch"])
    root_rng = RngStream(cfg.seed)
    log: list[dict] = []
    log_path = os.path.join(out_dir, "train_log.csv")
    for epoch in range(start_epoch, cfg.epochs):
        entry = train_epoch(model, images, opt, epoch, cfg, root_rng)
        log.append(entry)
        _write_log(log, log_path)
        if cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0 \
                and epoch + 1 < cfg.epochs:
            save_checkpoint(make_checkpoint(model, opt, cfg, epoch + 1),
                            os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt"))
            if on_checkpoint is not None:
                on_checkpoint(model, epoch + 1)
    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(make_checkpoint(model, opt, cfg, cfg.epochs), final_path)
    if on_checkpoint is not None:
        on_checkpoint(model, cfg.epochs)
    return final_path, log
