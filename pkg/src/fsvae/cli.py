"""Command-line entry point: train, generate, reconstruct, eval, count-ops,
sweep, plus a synthetic-dataset writer for offline environments."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as dio
from . import evalm
from .checkpoint import load_checkpoint
from .configfile import parse_config, write_effective_config
from .model import LOSS_FLAVORS, Fsvae, ModelConfig
from .rng import RngStream
from .train import TrainConfig, fit, restore_model


def _load_images(data_dir: str, resolution: int, train_count: int = 0,
                 eval_count: int = 0):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    train_raw, eval_raw = dio.load_train_eval(data_dir, train_count, eval_count)
    return dio.preprocess(train_raw, resolution), dio.preprocess(eval_raw, resolution)


def _apply_overrides(args, train_cfg: TrainConfig, model_cfg: ModelConfig):
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if getattr(args, "loss", None) is not None:
        flavor = {"mmd-psp": "mmd-psp", "mmd": "mmd", "kld": "kld"}[args.loss]
        model_cfg = replace(model_cfg, loss_flavor=flavor)
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    train_cfg, model_cfg = parse_config(args.config)
    train_cfg, model_cfg = _apply_overrides(args, train_cfg, model_cfg)
    train_images, eval_images = _load_images(args.data_dir, model_cfg.resolution,
                                             train_cfg.subset)
    os.makedirs(args.out_dir, exist_ok=True)
    write_effective_config(train_cfg, model_cfg, args.out_dir)
    model = Fsvae(model_cfg, RngStream(train_cfg.seed).child(11))
    preview = eval_images[:16] if len(eval_images) else train_images[:16]

    def snapshot(m, epoch):
        recon, _ = m.reconstruct(preview, RngStream(train_cfg.seed).child(13))
        dio.write_image_grid(recon, os.path.join(args.out_dir,
                                                 f"recon_epoch_{epoch:04d}.pgm"))

    final, _ = fit(model, train_images, train_cfg, args.out_dir,
                   resume_from=args.resume, on_checkpoint=snapshot)
    print(f"wrote {final} and {os.path.join(args.out_dir, 'train_log.csv')}")
    return 0


def cmd_generate(args) -> int:
    if args.n <= 0:
        raise ValueError(f"--n must be positive, got {args.n}")
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    os.makedirs(args.out_dir, exist_ok=True)
    train_cfg = TrainConfig(**ckpt.config["train"])
    write_effective_config(replace(train_cfg, seed=args.seed), model.cfg,
                           args.out_dir, {"command": "generate", "n": args.n})
    images, record = model.generate(args.n, RngStream(args.seed).child(21))
    dio.write_image_grid(images, os.path.join(args.out_dir, "generated_grid.pgm"))
    for i in range(args.n):
        dio.write_image_grid(images[i:i + 1],
                             os.path.join(args.out_dir, f"generated_{i:04d}.pgm"))
    if args.dump_latents:
        for i in range(args.n):
            raster = record.z[:, i, :].T.astype(int)  # (C, T)
            np.savetxt(os.path.join(args.out_dir, f"latents_{i:04d}.csv"),
                       raster, fmt="%d", delimiter=",")
    print(f"wrote {args.n} images to {args.out_dir}")
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    _, eval_images = _load_images(args.data_dir, model.cfg.resolution,
                                  eval_count=args.n)
    if len(eval_images) == 0:
        raise ValueError("no evaluation images found")
    eval_images = eval_images[:args.n]
    os.makedirs(args.out_dir, exist_ok=True)
    recon, _ = model.reconstruct(eval_images, RngStream(args.seed).child(22))
    dio.write_image_grid(eval_images, os.path.join(args.out_dir, "originals.pgm"))
    dio.write_image_grid(recon, os.path.join(args.out_dir, "reconstructions.pgm"))
    mse = float(np.mean((eval_images - recon) ** 2))
    print(f"reconstruction MSE over {len(eval_images)} images: {mse:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    train_images, eval_images = _load_images(args.data_dir, model.cfg.resolution,
                                             args.train_count, args.eval_count)
    os.makedirs(args.out_dir, exist_ok=True)
    rng = RngStream(args.seed).child(23)
    recon = evalm.reconstruction_loss(model, eval_images, rng.child(1))

    ae = evalm.EvalAutoencoder(resolution=model.cfg.resolution,
                               seed=args.seed + 999)
    ae.train(train_images, epochs=args.ae_epochs,
             batch_size=min(100, len(train_images)), seed=args.seed + 999)
    n = min(args.frechet_samples, len(eval_images))
    gen, _ = model.generate(n, rng.child(2))
    fd = evalm.frechet_distance(ae.encode(eval_images[:n]), ae.encode(gen))

    rates = evalm.firing_rate_report(model, eval_images[:min(200, len(eval_images))],
                                     rng.child(3))
    with open(os.path.join(args.out_dir, "metrics.csv"), "w") as f:
        f.write("metric,value\n")
        f.write(f"reconstruction_loss,{recon}\n")
        f.write(f"frechet_distance,{fd}\n")
    with open(os.path.join(args.out_dir, "firing_rates.csv"), "w") as f:
        f.write(rates.as_csv() + "\n")
    print(f"reconstruction_loss={recon:.6f} frechet_distance={fd:.4f}")
    return 0


def cmd_count_ops(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    graph = model.layer_graph()
    ann = evalm.count_ops(graph, "ANN", None, model.cfg.timesteps)
    _, eval_images = _load_images(args.data_dir, model.cfg.resolution,
                                  eval_count=args.eval_count or 200)
    rates = evalm.firing_rate_report(model, eval_images,
                                     RngStream(args.seed).child(24))
    snn = evalm.count_ops(graph, "SNN", rates.rates, model.cfg.timesteps)
    os.makedirs(args.out_dir, exist_ok=True)
    side_by_side = (
        f"{'model':<10}{'additions':>16}{'multiplications':>18}\n"
        f"{'ANN':<10}{ann.total_adds:>16.3e}{ann.total_muls:>18.3e}\n"
        f"{'FSVAE':<10}{snn.total_adds:>16.3e}{snn.total_muls:>18.3e}")
    text = ann.as_text() + "\n\n" + snn.as_text() + "\n\n" + side_by_side + "\n"
    with open(os.path.join(args.out_dir, "op_counts.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(args.out_dir, "op_counts_ann.csv"), "w") as f:
        f.write(ann.as_csv() + "\n")
    with open(os.path.join(args.out_dir, "op_counts_snn.csv"), "w") as f:
        f.write(snn.as_csv() + "\n")
    print(side_by_side)
    return 0


def cmd_sweep(args) -> int:
    train_cfg, model_cfg = parse_config(args.config)
    train_cfg, model_cfg = _apply_overrides(args, train_cfg, model_cfg)
    train_images, eval_images = _load_images(args.data_dir, model_cfg.resolution,
                                             train_cfg.subset)
    grid: list[tuple[str, int]] = []
    if args.timesteps:
        grid += [("timesteps", int(v)) for v in args.timesteps.split(",")]
    if args.k_values:
        grid += [("k", int(v)) for v in args.k_values.split(",")]
    if not grid:
        raise ValueError("sweep needs --timesteps and/or --k-values")
    os.makedirs(args.out_dir, exist_ok=True)
    write_effective_config(train_cfg, model_cfg, args.out_dir,
                           {"command": "sweep", "grid": grid})
    rows = evalm.sweep(model_cfg, train_cfg, train_images, eval_images, grid,
                       args.out_dir)
    csv_text = evalm.sweep_csv(rows)
    with open(os.path.join(args.out_dir, "sweep.csv"), "w") as f:
        f.write(csv_text + "\n")
    print(csv_text)
    for r in rows:
        if r["note"]:
            print(f"note: {r['param']}={r['value']} failed: {r['note']}",
                  file=sys.stderr)
    return 0


def cmd_synth_data(args) -> int:
    ds = dio.make_synthetic_digits(args.n, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    dio.write_idx(ds.images, os.path.join(args.out_dir, dio.TRAIN_IMAGES))
    n_eval = max(args.n // 10, 1)
    eval_ds = dio.make_synthetic_digits(n_eval, args.seed + 1)
    dio.write_idx(eval_ds.images, os.path.join(args.out_dir, dio.TEST_IMAGES))
    print(f"wrote {args.n} train and {n_eval} eval synthetic images to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsvae",
                                description="Fully spiking VAE trainer and tools")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, ckpt=False):
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--seed", type=int, default=0)
        if data:
            sp.add_argument("--data-dir", default=dio.default_data_dir())
        if ckpt:
            sp.add_argument("--ckpt", required=True)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--config", default=None)
    sp.add_argument("--loss", choices=list(LOSS_FLAVORS), default=None)
    sp.add_argument("--resume", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample images from the prior")
    common(sp, data=False, ckpt=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--dump-latents", action="store_true")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("reconstruct", help="reconstruct evaluation images")
    common(sp, ckpt=True)
    sp.add_argument("--n", type=int, default=16)
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("eval", help="reconstruction loss + Frechet distance")
    common(sp, ckpt=True)
    sp.add_argument("--frechet-samples", type=int, default=1000)
    sp.add_argument("--train-count", type=int, default=0)
    sp.add_argument("--eval-count", type=int, default=0)
    sp.add_argument("--ae-epochs", type=int, default=20)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("count-ops", help="ANN vs SNN operation counts")
    common(sp, ckpt=True)
    sp.add_argument("--eval-count", type=int, default=200)
    sp.set_defaults(func=cmd_count_ops)

    sp = sub.add_parser("sweep", help="timestep / k sweep")
    common(sp)
    sp.add_argument("--config", default=None)
    sp.add_argument("--loss", choices=list(LOSS_FLAVORS), default=None)
    sp.add_argument("--timesteps", default=None)
    sp.add_argument("--k-values", default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth-data", help="write a synthetic IDX dataset")
    common(sp, data=False)
    sp.add_argument("--n", type=int, default=2000)
    sp.set_defaults(func=cmd_synth_data)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry():
    raise SystemExit(main())
