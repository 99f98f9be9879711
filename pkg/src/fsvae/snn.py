"""Spiking layer primitives.

Spike sequences are arrays with time as the leading axis: (T, B, C) for
vectors, (T, B, C, H, W) for feature maps.  Values are float arrays holding
exactly 0.0 or 1.0; binariness is an invariant every layer here preserves.

A LIF neuron integrates u_t = tau_decay * u_{t-1} * (1 - o_{t-1}) + x_t and
fires o_t = 1 when u_t >= v_th (hard reset via the (1 - o) gate).  The
backward pass substitutes a rectangular surrogate for the firing step:
do/du = 1/a inside |u - v_th| < a/2, zero outside.  No gradient flows
through the reset gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_ops as T
from .layers import Conv2d, ConvTranspose2d, Layer, Linear, Param


@dataclass
class LifConfig:
    tau_decay: float = 0.25
    v_th: float = 0.5
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau_decay < 1.0:
            raise ValueError(f"tau_decay must be in (0,1), got {self.tau_decay}")
        if self.v_th <= 0.0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.surrogate_width <= 0.0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")


@dataclass
class NeuronState:
    """Membrane potentials and previous outputs of one layer."""
    u: np.ndarray
    o_prev: np.ndarray


def lif_step(state: NeuronState, x: np.ndarray, cfg: LifConfig):
    """One membrane update.  Returns (spikes, new_state)."""
    T.check_finite(x, "LIF input")
    T.check_same_shape(state.u, x, "membrane potential and input")
    u = cfg.tau_decay * state.u * (1.0 - state.o_prev) + x
    o = (u >= cfg.v_th).astype(x.dtype)
    return o, NeuronState(u=u, o_prev=o)


def surrogate_grad(u: np.ndarray, cfg: LifConfig) -> np.ndarray:
    """Rectangular surrogate derivative of the firing step."""
    inside = np.abs(u - cfg.v_th) < (cfg.surrogate_width / 2.0)
    return inside.astype(u.dtype) / cfg.surrogate_width


class Lif(Layer):
    """Stateful LIF layer usable per-step (autoregressive) or per-sequence."""

    def __init__(self, cfg: LifConfig):
        super().__init__()
        self.cfg = cfg
        self.state: NeuronState | None = None
        self._carry = None
        self.rate_sum = 0.0
        self.rate_count = 0

    def reset_state(self):
        self.state = None
        self._carry = None

    def reset_rate_stats(self):
        self.rate_sum = 0.0
        self.rate_count = 0

    def step_forward(self, x: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = NeuronState(u=np.zeros_like(x), o_prev=np.zeros_like(x))
        o_prev = self.state.o_prev
        o, self.state = lif_step(self.state, x, self.cfg)
        self._stack.append((self.state.u, o_prev))
        self.rate_sum += float(o.mean())
        self.rate_count += 1
        return o

    def step_backward(self, g_o: np.ndarray) -> np.ndarray:
        u, o_prev = self._pop()
        du = g_o * surrogate_grad(u, self.cfg)
        if self._carry is not None:
            du = du + self._carry
        self._carry = self.cfg.tau_decay * (1.0 - o_prev) * du
        return du

    def forward(self, x_seq: np.ndarray, training: bool = True) -> np.ndarray:
        self.reset_state()
        return np.stack([self.step_forward(x_seq[t]) for t in range(x_seq.shape[0])])

    def backward(self, gy_seq: np.ndarray) -> np.ndarray:
        self._carry = None
        gx = [self.step_backward(gy_seq[t]) for t in range(gy_seq.shape[0] - 1, -1, -1)]
        return np.stack(gx[::-1])


class TdBn(Layer):
    """Threshold-dependent batch norm: statistics jointly over batch, spatial
    and time axes per channel, scaled toward v_th."""

    def __init__(self, channels: int, v_th: float, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.v_th = v_th
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=np.float32))
        self.beta = Param(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, bufs: dict[str, np.ndarray]):
        self.running_mean = bufs["running_mean"].copy()
        self.running_var = bufs["running_var"].copy()

    def _param_shape(self, ndim: int):
        # channel axis is 2 for (T, B, C, ...)
        return (1, 1, self.channels) + (1,) * (ndim - 3)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        if x.shape[1] == 0:
            raise T.ShapeError("tdBN got an empty batch")
        if x.shape[2] != self.channels:
            raise T.ShapeError(f"tdBN expects {self.channels} channels, got input {x.shape}")
        axes = (0, 1) + tuple(range(3, x.ndim))
        shape = self._param_shape(x.ndim)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.channels
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean += self.momentum * (mean.astype(np.float32) - self.running_mean)
            self.running_var += self.momentum * (unbiased.astype(np.float32) - self.running_var)
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        y = (self.gamma.value.reshape(shape) * self.v_th) * xhat + self.beta.value.reshape(shape)
        self._stack.append((training, xhat, inv_std, axes, x.size // self.channels))
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        training, xhat, inv_std, axes, n = self._pop()
        shape = self._param_shape(gy.ndim)
        self.gamma.grad += (gy * xhat).sum(axis=axes) * self.v_th
        self.beta.grad += gy.sum(axis=axes)
        g = (self.gamma.value.reshape(shape) * self.v_th) * inv_std.reshape(shape)
        if not training:
            return gy * g
        mean_gy = gy.mean(axis=axes).reshape(shape)
        mean_gy_xhat = (gy * xhat).mean(axis=axes).reshape(shape)
        return g * (gy - mean_gy - xhat * mean_gy_xhat)


@dataclass
class PspState:
    """First-order synaptic filter state."""
    psp: np.ndarray
    tau_syn: float


def psp_update(state: PspState, z_t: np.ndarray) -> PspState:
    """psp <- (1 - 1/tau) * psp + (1/tau) * z_t."""
    inv = 1.0 / state.tau_syn
    return PspState(psp=(1.0 - inv) * state.psp + inv * z_t, tau_syn=state.tau_syn)


def psp_sequence(z_seq: np.ndarray, tau_syn: float) -> np.ndarray:
    """PSP value after each timestep of z_seq (time on axis 0)."""
    out = np.empty_like(z_seq)
    state = PspState(psp=np.zeros_like(z_seq[0]), tau_syn=tau_syn)
    for t in range(z_seq.shape[0]):
        state = psp_update(state, z_seq[t])
        out[t] = state.psp
    return out


class _SpikingBlock(Layer):
    """linear map -> tdBN -> LIF, over a full sequence or stepwise."""

    def __init__(self, linmap: Layer, bn: TdBn | None, lif: Lif):
        super().__init__()
        self.linmap = linmap
        self.bn = bn
        self.lif = lif

    def sublayers(self) -> dict[str, Layer]:
        subs = {"linmap": self.linmap, "lif": self.lif}
        if self.bn is not None:
            subs["bn"] = self.bn
        return subs

    def params(self) -> dict[str, Param]:
        out = {}
        for lname, layer in self.sublayers().items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def zero_grads(self):
        for layer in self.sublayers().values():
            layer.zero_grads()

    def clear_saved(self):
        for layer in self.sublayers().values():
            layer.clear_saved()

    def reset_state(self):
        self.lif.reset_state()

    def _map_seq(self, s_seq, forward: bool, arg):
        raise NotImplementedError

    def forward(self, s_seq: np.ndarray, training: bool = True) -> np.ndarray:
        y = self._map_seq(s_seq, True, None)
        if self.bn is not None:
            y = self.bn.forward(y, training)
        return self.lif.forward(y, training)

    def backward(self, g_seq: np.ndarray) -> np.ndarray:
        g = self.lif.backward(g_seq)
        if self.bn is not None:
            g = self.bn.backward(g)
        return self._map_seq(g, False, None)

    def step(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        """One autoregressive timestep.  tdBN statistics are per-step batch
        statistics here (the full time window is not available causally)."""
        y = self.linmap.forward(x, training)
        if self.bn is not None:
            y = self.bn.forward(y[None], training)[0]
        return self.lif.step_forward(y)

    def step_backward(self, g_o: np.ndarray) -> np.ndarray:
        g = self.lif.step_backward(g_o)
        if self.bn is not None:
            g = self.bn.backward(g[None])[0]
        return self.linmap.backward(g)


class SpikingLinear(_SpikingBlock):
    def __init__(self, in_features: int, out_features: int, rng, cfg: LifConfig,
                 use_bn: bool = True):
        lin = Linear(in_features, out_features, rng)
        bn = TdBn(out_features, cfg.v_th) if use_bn else None
        super().__init__(lin, bn, Lif(cfg))

    def _map_seq(self, seq, forward, arg):
        return self.linmap.forward(seq) if forward else self.linmap.backward(seq)


class _FoldTime:
    """Fold (T, B, ...) into (T*B, ...) around a spatial layer call."""

    @staticmethod
    def apply(fn, seq):
        t, b = seq.shape[:2]
        out = fn(seq.reshape((t * b,) + seq.shape[2:]))
        return out.reshape((t, b) + out.shape[1:])


class SpikingConv(_SpikingBlock):
    def __init__(self, in_channels: int, out_channels: int, rng, cfg: LifConfig,
                 kernel: int = 3, stride: int = 2, pad: int = 1, use_bn: bool = True):
        conv = Conv2d(in_channels, out_channels, rng, kernel, stride, pad)
        bn = TdBn(out_channels, cfg.v_th) if use_bn else None
        super().__init__(conv, bn, Lif(cfg))

    def _map_seq(self, seq, forward, arg):
        fn = self.linmap.forward if forward else self.linmap.backward
        return _FoldTime.apply(fn, seq)


class SpikingDeconv(_SpikingBlock):
    def __init__(self, in_channels: int, out_channels: int, rng, cfg: LifConfig,
                 kernel: int = 3, stride: int = 2, pad: int = 1, out_pad: int = 1,
                 use_bn: bool = True):
        deconv = ConvTranspose2d(in_channels, out_channels, rng, kernel, stride, pad, out_pad)
        bn = TdBn(out_channels, cfg.v_th) if use_bn else None
        super().__init__(deconv, bn, Lif(cfg))

    def _map_seq(self, seq, forward, arg):
        fn = self.linmap.forward if forward else self.linmap.backward
        return _FoldTime.apply(fn, seq)
