"""End-to-end acceptance checks.

Each test prints one `[PASS]`/`[FAIL]` line for its criterion (visible with
`pytest -s` or in the captured output of failing tests).  The desk-scale
training run is shared by the training, ablation, and op-count criteria and
is executed twice to verify bit-identical reruns; everything else runs in
seconds.
"""

import os
import struct
import time

import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from fsvae import data as dio
from fsvae import evalm
from fsvae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fsvae.configfile import parse_config
from fsvae.layers import Conv2d, Linear
from fsvae.model import (Fsvae, ModelConfig, OutputAccumulator, mmd_loss,
                         kld_loss)
from fsvae.rng import RngStream
from fsvae.snn import (Lif, LifConfig, TdBn, psp_sequence, surrogate_grad)
from fsvae.train import TrainConfig, fit

from test_snn import _dual_lif_psp_grad


def _report(num, desc, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {desc}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num}: {desc} {detail}"


# ---- 1: neuron dynamics oracle --------------------------------------------

def test_criterion_01_lif_dynamics_oracle():
    cfg = LifConfig()
    t0 = time.monotonic()
    checked = 0
    rng = RngStream(100)
    max_u_err = 0.0
    while checked < 1000:
        n = min(100, 1000 - checked)
        t_steps = 2 + rng.uniform_int(31)
        x = (rng.uniform((t_steps, n)) * 2.0 - 0.5).astype(np.float64)
        lif = Lif(cfg)
        out = lif.forward(x)
        us = np.stack([saved[0] for saved in lif._stack])
        for j in range(n):
            u, o_prev = 0.0, 0.0
            for t in range(t_steps):
                u = cfg.tau_decay * u * (1.0 - o_prev) + float(x[t, j])
                o_prev = 1.0 if u >= cfg.v_th else 0.0
                assert out[t, j] == o_prev, "spike mismatch"
                max_u_err = max(max_u_err, abs(us[t, j] - u))
        checked += n
    elapsed = time.monotonic() - t0
    ok = max_u_err < 1e-6 and elapsed < 10.0
    _report(1, "1000 LIF sequences match the scalar recurrence", ok,
            f"max |u| err {max_u_err:.2e}, {elapsed:.1f}s")


# ---- 2: PSP equivalence ----------------------------------------------------

def test_criterion_02_psp_recurrence_vs_closed_form():
    t0 = time.monotonic()
    rng = RngStream(200)
    worst = 0.0
    for _ in range(1000):
        t_steps = 1 + rng.uniform_int(32)
        tau = 1.0 + rng.uniform() * 5.0
        z = (rng.uniform((t_steps, 2)) < 0.5).astype(np.float64)
        rec = psp_sequence(z, tau)
        inv = 1.0 / tau
        kernel = inv * (1.0 - inv) ** np.arange(t_steps)
        for t in range(t_steps):
            closed = kernel[:t + 1] @ z[t::-1]
            worst = max(worst, float(np.abs(rec[t] - closed).max()))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-6 and elapsed < 5.0
    _report(2, "PSP recurrence equals the closed form on 1000 sequences", ok,
            f"max err {worst:.2e}, {elapsed:.1f}s")


# ---- 3: sampler statistics -------------------------------------------------

def test_criterion_03_sampler_statistics():
    from fsvae.latent import select_spikes
    t0 = time.monotonic()
    n = 100000
    worst = 0.0
    for k in (2, 4, 20):
        for m in {1, k // 2, k - 1}:
            block = np.zeros((n, k), dtype=np.float32)
            block[:, :m] = 1.0
            z, pi, _ = select_spikes(block, k, RngStream(300 + 31 * k + m))
            p = m / k
            assert np.all(pi == np.float32(p))
            sigma = np.sqrt(p * (1.0 - p) / n)
            dev = abs(float(z.mean()) - p) / sigma
            worst = max(worst, dev)
    elapsed = time.monotonic() - t0
    ok = worst < 3.0 and elapsed < 30.0
    _report(3, "random-select z mean within 3 sigma of m/k for k in {2,4,20}",
            ok, f"worst deviation {worst:.2f} sigma, {elapsed:.1f}s")


# ---- 4: MMD identities -----------------------------------------------------

def test_criterion_04_mmd_identities():
    rng = RngStream(400)
    pi = rng.uniform((8, 4))
    zero, _, _ = mmd_loss(pi, pi.copy(), 2.0)
    hand, _, _ = mmd_loss(np.ones((1, 1)), np.zeros((1, 1)), 2.0)

    # Monte Carlo over Bernoulli spike trains vs the pi form
    tau = 2.0
    pi_q = 0.2 + 0.6 * rng.uniform((8, 4))
    pi_p = 0.2 + 0.6 * rng.uniform((8, 4))
    analytic, _, _ = mmd_loss(pi_q, pi_p, tau)

    def features(z):
        # z (N, T, C) -> PSP features (N, T*C)
        f = psp_sequence(np.moveaxis(z, 0, 1), tau)
        return np.moveaxis(f, 0, 1).reshape(z.shape[0], -1)

    estimates = []
    n = 400
    for rep in range(24):
        r = rng.child(rep + 1)
        zq = (r.uniform((n, 8, 4)) < pi_q).astype(np.float64)
        zp = (r.uniform((n, 8, 4)) < pi_p).astype(np.float64)
        fq, fp = features(zq), features(zp)
        kqq = fq @ fq.T
        kpp = fp @ fp.T
        kqp = fq @ fp.T
        off = n * (n - 1)
        est = ((kqq.sum() - np.trace(kqq)) / off
               + (kpp.sum() - np.trace(kpp)) / off
               - 2.0 * kqp.mean())
        estimates.append(est)
    mean = float(np.mean(estimates))
    sem = float(np.std(estimates, ddof=1) / np.sqrt(len(estimates)))
    dev = abs(mean - analytic) / sem

    ok = zero == 0.0 and abs(hand - 0.25) < 1e-7 and dev < 3.0
    _report(4, "MMD identities and Monte Carlo expectation form", ok,
            f"self 0, hand |{hand:.8f}-0.25|, MC dev {dev:.2f} sigma")


# ---- 5: gradient checks ----------------------------------------------------

def test_criterion_05_gradient_checks():
    t0 = time.monotonic()
    worst = {"smooth": 0.0, "spike": 0.0}

    def fd_check(layer, x, target):
        def loss():
            y = layer.forward(x.copy())
            return float(np.sum((y - target) ** 2))
        for p in layer.params().values():
            p.value = p.value.astype(np.float64)
            p.grad = np.zeros_like(p.value)
        y = layer.forward(x.copy())
        gx = layer.backward(2.0 * (y - target))
        layer.clear_saved()
        errs = [rel_err(gx, numeric_grad(loss, x))]
        for p in layer.params().values():
            errs.append(rel_err(p.grad, numeric_grad(loss, p.value)))
        return max(errs)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        tgt = np.random.default_rng(seed + 104729)

        # FC
        lin = Linear(3, 4, RngStream(seed))
        x = rng.normal(size=(2, 3))
        worst["smooth"] = max(worst["smooth"],
                              fd_check(lin, x, tgt.normal(size=(2, 4))))
        # conv
        conv = Conv2d(2, 2, RngStream(seed))
        x = rng.normal(size=(1, 2, 4, 4))
        worst["smooth"] = max(worst["smooth"],
                              fd_check(conv, x, tgt.normal(size=(1, 2, 2, 2))))
        # tdBN
        bn = TdBn(2, v_th=0.5)
        x = rng.normal(size=(2, 3, 2))
        worst["smooth"] = max(worst["smooth"],
                              fd_check(bn, x, tgt.normal(size=(2, 3, 2))))
        # decode accumulator + tanh
        acc = OutputAccumulator(0.8)
        x = rng.uniform(size=(4, 2, 3))
        target = tgt.normal(size=(2, 3))
        out = acc.forward(x)
        gx = acc.backward(2.0 * (out - target))
        num = numeric_grad(
            lambda: float(np.sum((acc.forward(x) - target) ** 2)), x)
        worst["smooth"] = max(worst["smooth"], rel_err(gx, num))
        # MSE
        x = rng.normal(size=(2, 3))
        target = tgt.normal(size=(2, 3))
        g_mse = (2.0 / x.size) * (x - target)
        num = numeric_grad(lambda: float(np.mean((x - target) ** 2)), x)
        worst["smooth"] = max(worst["smooth"], rel_err(g_mse, num))
        # MMD wrt pi (PSP chain included)
        pi_q = rng.uniform(0.1, 0.9, size=(4, 2))
        pi_p = rng.uniform(0.1, 0.9, size=(4, 2))
        _, g_q, g_p = mmd_loss(pi_q, pi_p, 2.0)
        num_q = numeric_grad(lambda: mmd_loss(pi_q, pi_p, 2.0)[0], pi_q, h=1e-4)
        num_p = numeric_grad(lambda: mmd_loss(pi_q, pi_p, 2.0)[0], pi_p, h=1e-4)
        worst["smooth"] = max(worst["smooth"], rel_err(g_q, num_q),
                              rel_err(g_p, num_p))

        # spike path: BPTT through LIF + PSP vs the forward-mode unrolled
        # oracle built on the rectangular surrogate
        cfg = LifConfig()
        srng = RngStream(500 + seed)
        x = (srng.uniform((6, 4)) * 1.6 - 0.3).astype(np.float64)
        coeffs = srng.uniform((6, 4)) * 2.0 - 1.0
        lif = Lif(cfg)
        lif.forward(x)
        inv = 0.5
        g_o = np.empty_like(coeffs)
        g_psp = np.zeros(4)
        for t in range(5, -1, -1):
            g_psp = coeffs[t] + (1.0 - inv) * g_psp
            g_o[t] = inv * g_psp
        gx = lif.backward(g_o)
        oracle = _dual_lif_psp_grad(x, coeffs, cfg, 2.0)
        worst["spike"] = max(worst["spike"], float(np.abs(gx - oracle).max()))

    elapsed = time.monotonic() - t0
    ok = worst["smooth"] < 1e-3 and worst["spike"] < 1e-10 and elapsed < 120.0
    _report(5, "finite differences on smooth ops, unrolled oracle on spikes",
            ok, f"smooth rel {worst['smooth']:.2e}, spike abs "
                f"{worst['spike']:.2e}, {elapsed:.0f}s")


# ---- 6: spike-to-image decode ----------------------------------------------

def test_criterion_06_decode_hand_case():
    out = OutputAccumulator(0.8).forward(np.ones((16, 1, 2, 2)))
    expected = np.tanh((1.0 - 0.8 ** 16) / 0.2)
    err = float(np.abs(out - expected).max())
    ok = err < 1e-5 and abs((1.0 - 0.8 ** 16) / 0.2 - 4.859262) < 1e-6
    _report(6, "all-ones decode equals tanh(4.85926...)", ok, f"err {err:.2e}")


# ---- 7/8/9: desk-scale training shared run ---------------------------------

DESK_MODEL = dict(resolution=32, encoder_channels=(16, 32, 64, 64),
                  latent_channels=32, k=4, timesteps=8,
                  posterior_hidden=64, prior_hidden=64)


def _desk_images():
    """2,000 train + 200 eval images: MNIST when FSVAE_DATA_DIR provides IDX
    files, otherwise the synthetic digit fallback."""
    data_dir = os.environ.get("FSVAE_DATA_DIR", "data")
    if os.path.exists(os.path.join(data_dir, dio.TRAIN_IMAGES)):
        train, evals = dio.load_train_eval(data_dir, 2000, 200)
        source = f"idx files in {data_dir}"
    else:
        ds = dio.make_synthetic_digits(2200, seed=123)
        train, evals = ds.images[:2000], ds.images[2000:]
        source = "synthetic digits"
    return dio.preprocess(train, 32), dio.preprocess(evals, 32), source


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    train, evals, source = _desk_images()
    tcfg = TrainConfig(epochs=20, batch_size=50, seed=0, checkpoint_every=0)
    runs = []
    for name in ("a", "b"):
        out = str(tmp_path_factory.mktemp(f"desk_{name}"))
        model = Fsvae(ModelConfig(**DESK_MODEL), RngStream(0).child(11))
        t0 = time.monotonic()
        fit(model, train, tcfg, out)
        runs.append({"model": model, "seconds": time.monotonic() - t0,
                     "log": _read_log(os.path.join(out, "train_log.csv")),
                     "state": {k: v.copy()
                               for k, v in model.state_tensors().items()}})
    return {"runs": runs, "train": train, "eval": evals, "source": source}


def _read_log(path):
    import csv
    with open(path) as f:
        return list(csv.DictReader(f))


def test_criterion_07_training_smoke(desk_run):
    a, b = desk_run["runs"]
    first = float(a["log"][0]["loss"])
    last = float(a["log"][-1]["loss"])
    drop = 1.0 - last / first

    model = a["model"]
    evals = desk_run["eval"]
    recon = evalm.reconstruction_loss(model, evals, RngStream(1))
    mean_img = desk_run["train"].mean(axis=0, keepdims=True)
    baseline = float(np.mean((evals - mean_img) ** 2))

    identical = (set(a["state"]) == set(b["state"])
                 and all(np.array_equal(a["state"][k], b["state"][k])
                         for k in a["state"]))
    log_identical = all(
        ra["loss"] == rb["loss"] and ra["recon"] == rb["recon"]
        and ra["dist"] == rb["dist"]
        for ra, rb in zip(a["log"], b["log"]))
    in_budget = a["seconds"] < 1800 and b["seconds"] < 1800

    ok = drop >= 0.30 and recon < baseline and identical and log_identical \
        and in_budget
    _report(7, "desk-scale training converges, beats baseline, bit-identical",
            ok, f"{desk_run['source']}; loss {first:.3f}->{last:.3f} "
                f"(-{drop:.0%}), recon {recon:.4f} vs baseline "
                f"{baseline:.4f}, rerun identical={identical and log_identical}, "
                f"{a['seconds']:.0f}s+{b['seconds']:.0f}s")


def test_criterion_08_loss_flavor_ablation(desk_run, tmp_path):
    train = desk_run["train"][:500]
    tcfg = TrainConfig(epochs=2, batch_size=50, seed=0, checkpoint_every=0)
    results = {}
    for flavor in ("kld", "mmd", "mmd-psp"):
        model = Fsvae(ModelConfig(loss_flavor=flavor, **DESK_MODEL),
                      RngStream(0).child(11))
        _, log = fit(model, train, tcfg, str(tmp_path / flavor))
        losses = [float(e["loss"]) for e in log]
        finite = all(np.isfinite(v) for v in losses) and all(
            np.all(np.isfinite(p.value)) for p in model.params().values())
        results[flavor] = (finite, losses[-1])
    # epsilon guard keeps KLD finite even at fully saturated probabilities
    sat, g_q, g_p = kld_loss(np.ones((8, 32)), np.zeros((8, 32)))
    kld_guarded = np.isfinite(sat) and not g_q.any()

    ok = all(finite for finite, _ in results.values()) and kld_guarded
    detail = ", ".join(f"{fl} {loss:.3f}" for fl, (_, loss) in results.items())
    _report(8, "all three loss flavors train without divergence", ok, detail)


def test_criterion_09_op_counting_direction(desk_run):
    # full-scale architecture, firing rates measured on the desk model
    full = ModelConfig()  # (32,64,128,256), C=128, k=20, T=16
    graph = Fsvae(full, RngStream(0).child(11)).layer_graph()
    rates = evalm.firing_rate_report(desk_run["runs"][0]["model"],
                                     desk_run["eval"], RngStream(2))
    ann = evalm.count_ops(graph, "ANN", None, full.timesteps)
    snn = evalm.count_ops(graph, "SNN", rates.rates, full.timesteps)
    mul_ratio = ann.total_muls / snn.total_muls
    ok = mul_ratio >= 5.0 and ann.total_adds < snn.total_adds
    _report(9, "SNN muls >= 5x below ANN, ANN adds below SNN adds", ok,
            f"ANN {ann.total_adds:.2e}add/{ann.total_muls:.2e}mul, "
            f"SNN {snn.total_adds:.2e}add/{snn.total_muls:.2e}mul, "
            f"mul ratio {mul_ratio:.1f}x")


# ---- 10: Frechet distance --------------------------------------------------

def test_criterion_10_frechet_unit_checks():
    feats = RngStream(600).uniform((300, 8))
    self_d = evalm.frechet_distance(feats, feats.copy())
    a = np.sqrt(0.5)
    analytic = evalm.frechet_distance(np.array([[-a], [a]]),
                                      np.array([[1.0 - a], [1.0 + a]]))
    other = RngStream(601).uniform((300, 8)) + 0.2
    sym = abs(evalm.frechet_distance(feats, other)
              - evalm.frechet_distance(other, feats))
    ok = self_d <= 1e-6 and abs(analytic - 1.0) < 1e-9 and sym < 1e-9
    _report(10, "Frechet distance: zero self, analytic 1-D case, symmetric",
            ok, f"self {self_d:.1e}, 1-D {analytic:.9f}, asym {sym:.1e}")


# ---- 11: I/O round trips ---------------------------------------------------

def test_criterion_11_io_round_trips(tmp_path):
    # IDX
    images = RngStream(700).uniform_ints(256, (6, 28, 28)).astype(np.uint8)
    dio.write_idx(images, str(tmp_path / "idx"))
    idx_ok = np.array_equal(dio.load_idx(str(tmp_path / "idx")).images, images)
    with open(tmp_path / "badidx", "wb") as f:
        f.write(struct.pack(">IIII", 0x123, 1, 2, 2) + b"\0" * 4)
    try:
        dio.load_idx(str(tmp_path / "badidx"))
        idx_validates = False
    except ValueError:
        idx_validates = True

    # PGM
    img = (RngStream(701).uniform((1, 8, 8)) * 2.0 - 1.0).astype(np.float32)
    dio.write_image_grid(img, str(tmp_path / "img.pgm"))
    back = dio.read_pgm(str(tmp_path / "img.pgm"))
    pgm_ok = np.array_equal(
        back, np.clip((img[0] + 1.0) * 127.5, 0, 255).astype(np.uint8))

    # checkpoint
    ckpt = Checkpoint(config={"next_epoch": 1},
                      tensors={"w": np.arange(4, dtype=np.float32)})
    save_checkpoint(ckpt, str(tmp_path / "c.ckpt"))
    loaded = load_checkpoint(str(tmp_path / "c.ckpt"))
    ckpt_ok = (loaded.config == ckpt.config
               and np.array_equal(loaded.tensors["w"], ckpt.tensors["w"]))
    raw = bytearray(open(tmp_path / "c.ckpt", "rb").read())
    raw[-2] ^= 0x01
    with open(tmp_path / "c.ckpt", "wb") as f:
        f.write(bytes(raw))
    try:
        load_checkpoint(str(tmp_path / "c.ckpt"))
        ckpt_validates = False
    except ValueError:
        ckpt_validates = True

    # config
    (tmp_path / "cfg").write_text("timesteps = 8\nlr = 0.01\n")
    tcfg, mcfg = parse_config(str(tmp_path / "cfg"))
    cfg_ok = mcfg.timesteps == 8 and tcfg.lr == 0.01
    defaults_ok = parse_config(None)[1].timesteps == 16

    ok = all([idx_ok, idx_validates, pgm_ok, ckpt_ok, ckpt_validates,
              cfg_ok, defaults_ok])
    _report(11, "IDX/PGM/checkpoint/config round trips and validation", ok)
