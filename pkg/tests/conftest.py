"""Shared test helpers: finite differences, dtype casting, tiny configs."""

import numpy as np
import pytest

from fsvae.rng import RngStream


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of scalar-valued f() wrt array x (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    # the floor keeps genuinely-zero gradients (e.g. a bias feeding a
    # mean-subtracting norm) from tripping on round-off noise
    denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / denom)


def cast_params(params, dtype=np.float64):
    """Recast every Param (and its grad) in a {name: Param} dict."""
    for p in params.values():
        p.value = p.value.astype(dtype)
        p.grad = np.zeros_like(p.value)


def check_layer_grads(layer, x, seed, tol=1e-3):
    """Central-difference check of a Layer's input and parameter gradients
    against a squared-error loss, in float64."""
    rng = np.random.default_rng(seed + 104729)  # decorrelated from the input
    cast_params(layer.params(), np.float64)

    def loss():
        y = layer.forward(x.copy())
        return float(np.sum((y - target) ** 2))

    y0 = layer.forward(x.copy())
    target = rng.normal(size=y0.shape)
    layer.clear_saved()

    layer.forward(x.copy())
    layer.zero_grads()
    gx = layer.backward(2.0 * (y0 - target))

    num_gx = numeric_grad(loss, x)
    assert rel_err(gx, num_gx) < tol, f"input grad mismatch (seed {seed})"
    for name, p in layer.params().items():
        num = numeric_grad(loss, p.value)
        assert rel_err(p.grad, num) < tol, f"{name} grad mismatch (seed {seed})"
    layer.clear_saved()


@pytest.fixture
def rng():
    return RngStream(1234)
