import csv
import os

import numpy as np
import pytest

from fsvae.checkpoint import load_checkpoint
from fsvae.model import Fsvae
from fsvae.rng import RngStream
from fsvae.train import (LOG_FIELDS, TrainConfig, fit, mix_probability,
                         restore_model)

from test_model import tiny_config


def _images(n=12, seed=0):
    return (RngStream(seed).uniform((n, 1, 8, 8)) * 2.0 - 1.0).astype(np.float32)


def _model(seed=0):
    return Fsvae(tiny_config(), RngStream(seed).child(11))


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="schedule_ceiling"):
        TrainConfig(schedule_ceiling=1.5)


def test_mix_probability_schedule():
    cfg = TrainConfig(epochs=20, schedule_ceiling=0.3)
    assert mix_probability(0, cfg) == 0.0
    assert mix_probability(19, cfg) == pytest.approx(0.3)
    assert mix_probability(10, cfg) == pytest.approx(0.3 * 10 / 19)
    assert mix_probability(0, TrainConfig(epochs=1)) == 0.0


def test_fit_writes_log_and_final_checkpoint(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=6, seed=0, checkpoint_every=0)
    final, log = fit(_model(), _images(), cfg, str(tmp_path))
    assert os.path.basename(final) == "final.ckpt"
    assert len(log) == 2
    with open(tmp_path / "train_log.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == LOG_FIELDS
    assert rows[0] == ["epoch", "loss", "recon", "dist", "fire_rate_post",
                       "fire_rate_prior", "seconds"]
    assert len(rows) == 3
    assert float(rows[1][1]) == pytest.approx(log[0]["loss"])

    ckpt = load_checkpoint(final)
    assert ckpt.config["next_epoch"] == 2
    model = restore_model(ckpt)
    assert model.cfg == tiny_config()


def test_fit_is_bit_identical_across_reruns(tmp_path):
    states = []
    for run in range(2):
        model = _model()
        cfg = TrainConfig(epochs=2, batch_size=6, seed=3, checkpoint_every=0)
        fit(model, _images(), cfg, str(tmp_path / f"run{run}"))
        states.append({k: v.copy() for k, v in model.state_tensors().items()})
    for k in states[0]:
        assert np.array_equal(states[0][k], states[1][k]), k


def test_different_seed_changes_training(tmp_path):
    finals = []
    for seed in (0, 1):
        model = _model()
        cfg = TrainConfig(epochs=1, batch_size=6, seed=seed, checkpoint_every=0)
        fit(model, _images(), cfg, str(tmp_path / f"s{seed}"))
        finals.append(model.params()["decoder.fc.linmap.weight"].value.copy())
    assert not np.array_equal(finals[0], finals[1])


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = TrainConfig(epochs=4, batch_size=6, seed=1, checkpoint_every=2)
    straight = _model()
    fit(straight, _images(), cfg, str(tmp_path / "full"))

    # restart epochs 2..3 from the mid-run checkpoint with fresh weights that
    # the load fully overwrites
    resumed = _model(seed=42)
    fit(resumed, _images(), cfg, str(tmp_path / "resumed"),
        resume_from=str(tmp_path / "full" / "epoch_0002.ckpt"))

    a = straight.state_tensors()
    b = resumed.state_tensors()
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_checkpoint_cadence(tmp_path):
    cfg = TrainConfig(epochs=5, batch_size=6, seed=0, checkpoint_every=2)
    seen = []
    fit(_model(), _images(), cfg, str(tmp_path),
        on_checkpoint=lambda m, e: seen.append(e))
    assert os.path.exists(tmp_path / "epoch_0002.ckpt")
    assert os.path.exists(tmp_path / "epoch_0004.ckpt")
    assert os.path.exists(tmp_path / "final.ckpt")
    assert seen == [2, 4, 5]


def test_subset_limits_training_data(tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=0, subset=4, checkpoint_every=0)
    model = _model()
    t0 = os.times().elapsed
    fit(model, _images(n=12), cfg, str(tmp_path))
    # one batch only: the log reflects a single optimizer step
    ckpt = load_checkpoint(str(tmp_path / "final.ckpt"))
    assert int(ckpt.tensors["opt.step_count"][0]) == 1


def test_nan_poisoned_weights_abort_with_location(tmp_path):
    model = _model()
    model.params()["encoder.conv1.linmap.weight"].value[...] = np.nan
    cfg = TrainConfig(epochs=1, batch_size=6, seed=0, checkpoint_every=0)
    with pytest.raises(FloatingPointError, match="epoch 0 batch 0"):
        fit(model, _images(), cfg, str(tmp_path))
