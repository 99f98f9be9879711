"""Differentiable layers with explicit forward/backward and saved state.

Every forward call pushes its saved state onto a per-layer stack and every
backward call pops it, so a layer can be driven either over a whole sequence
at once or one timestep at a time (autoregressive use) with the same code.
Parameter gradients accumulate across backward calls until zero_grads().
"""

from __future__ import annotations

import numpy as np

from . import tensor_ops as T


class Param:
    """A trainable array plus its accumulated gradient."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def he_uniform(rng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform init in [-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / max(fan_in, 1))
    u = rng.uniform(shape)
    return ((u * 2.0 - 1.0) * bound).astype(dtype)


class Layer:
    """Base: named params, a saved-state stack, forward/backward protocol."""

    def __init__(self):
        self._stack: list = []

    def params(self) -> dict[str, Param]:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Param):
                out[name] = val
        return out

    def zero_grads(self):
        for p in self.params().values():
            p.grad[...] = 0.0

    def clear_saved(self):
        self._stack.clear()

    def _pop(self):
        if not self._stack:
            raise RuntimeError(f"{type(self).__name__}.backward called without saved forward state")
        return self._stack.pop()

    def forward(self, x, training: bool = True):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


class Linear(Layer):
    """y = x @ W + b over the last axis; any leading axes are batch."""

    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(he_uniform(rng, (in_features, out_features), in_features))
        self.bias = Param(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x, training: bool = True):
        if x.shape[-1] != self.in_features:
            raise T.ShapeError(
                f"Linear expects last dim {self.in_features}, got input shape {x.shape}")
        self._stack.append(x)
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, gy):
        x = self._pop()
        x2 = x.reshape(-1, self.in_features)
        g2 = gy.reshape(-1, self.out_features)
        self.weight.grad += x2.T @ g2
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        return gy @ self.weight.value.T


class Conv2d(Layer):
    """Strided 2-D convolution on (N, C, H, W)."""

    def __init__(self, in_channels: int, out_channels: int, rng,
                 kernel: int = 3, stride: int = 2, pad: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_channels * kernel * kernel
        self.weight = Param(he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Param(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x, training: bool = True):
        b = self.bias.value if self.bias is not None else None
        y, cols = T.conv2d(x, self.weight.value, b, self.stride, self.pad)
        self._stack.append((x.shape, cols))
        return y

    def backward(self, gy):
        x_shape, cols = self._pop()
        gx, gw, gb = T.conv2d_backward(gy, x_shape, self.weight.value, cols,
                                       self.stride, self.pad)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class ConvTranspose2d(Layer):
    """Transposed convolution; with kernel 3, stride 2, pad 1, out_pad 1 it
    exactly doubles the spatial size (the inverse of the Conv2d default)."""

    def __init__(self, in_channels: int, out_channels: int, rng,
                 kernel: int = 3, stride: int = 2, pad: int = 1, out_pad: int = 1,
                 bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel, self.stride, self.pad, self.out_pad = kernel, stride, pad, out_pad
        fan_in = in_channels * kernel * kernel
        self.weight = Param(he_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in))
        self.bias = Param(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x, training: bool = True):
        b = self.bias.value if self.bias is not None else None
        y = T.conv_transpose2d(x, self.weight.value, b, self.stride, self.pad, self.out_pad)
        self._stack.append(x)
        return y

    def backward(self, gy):
        x = self._pop()
        gx, gw, gb = T.conv_transpose2d_backward(gy, x, self.weight.value,
                                                 self.stride, self.pad)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class Tanh(Layer):
    def forward(self, x, training: bool = True):
        y = np.tanh(x)
        self._stack.append(y)
        return y

    def backward(self, gy):
        y = self._pop()
        return gy * (1.0 - y * y)


class Relu(Layer):
    def forward(self, x, training: bool = True):
        mask = x > 0
        self._stack.append(mask)
        return x * mask

    def backward(self, gy):
        mask = self._pop()
        return gy * mask


def collect_params(named_layers: dict[str, Layer]) -> dict[str, Param]:
    """Flatten {layer_name: layer} into {layer_name.param_name: Param}."""
    out = {}
    for lname, layer in named_layers.items():
        for pname, p in layer.params().items():
            out[f"{lname}.{pname}"] = p
    return out
