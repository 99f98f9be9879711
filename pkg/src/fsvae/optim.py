"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .layers import Param
from .tensor_ops import global_norm


class AdamW:
    """Standard AdamW: params are first shrunk by (1 - lr*wd), then moved by
    the bias-corrected Adam delta."""

    def __init__(self, params: dict[str, Param], lr: float = 1e-3,
                 weight_decay: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def clip_grads(self, max_norm: float) -> float:
        """Global-norm gradient clipping; returns the pre-clip norm."""
        norm = global_norm(p.grad for p in self.params.values())
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                p.grad *= scale
        return norm

    def step(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.value *= (1.0 - self.lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.array([self.step_count], dtype=np.int64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.step_count = int(tensors["step_count"][0])
        for k in self.params:
            self.m[k] = tensors[f"m.{k}"].copy()
            self.v[k] = tensors[f"v.{k}"].copy()
