"""Dense tensor primitives: conv / transposed conv via im2col, shape checks.

All functions are dtype-preserving (float32 in production, float64 in the
finite-difference tests) and operate on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def check_finite(x: np.ndarray, what: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def convt_out_size(size: int, kernel: int, stride: int, pad: int, out_pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel + out_pad


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*kh*kw, OH*OW)."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: (B, C*kh*kw, OH*OW) -> (B, C, H, W), summing overlaps."""
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
           stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward conv.  x (B,Cin,H,W), w (Cout,Cin,kh,kw).  Returns (y, cols)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, pad)
    y = np.matmul(w.reshape(cout, -1), cols)  # (B, Cout, OH*OW) by broadcasting
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(wd, kw, stride, pad)
    y = y.reshape(bs, cout, oh, ow)
    if b is not None:
        y = y + b[None, :, None, None]
    return y, cols


def conv2d_backward(gy: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray,
                    stride: int, pad: int):
    """Gradients of conv2d.  Returns (gx, gw, gb)."""
    bs = gy.shape[0]
    cout = w.shape[0]
    gy2 = gy.reshape(bs, cout, -1)  # (B, Cout, L)
    gflat = np.ascontiguousarray(gy2.transpose(1, 0, 2)).reshape(cout, -1)
    cflat = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(-1, cols.shape[1])
    gw = (gflat @ cflat).reshape(w.shape)
    gb = gy2.sum(axis=(0, 2))
    gcols = np.matmul(w.reshape(cout, -1).T, gy2)  # (B, Cin*k*k, L)
    gx = col2im(gcols, x_shape, w.shape[2], w.shape[3], stride, pad)
    return gx, gw, gb


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     stride: int, pad: int, out_pad: int) -> np.ndarray:
    """Transposed conv.  x (B,Cin,H,W), w (Cin,Cout,kh,kw)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {w.shape}")
    bs, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = convt_out_size(h, kh, stride, pad, out_pad)
    ow = convt_out_size(wd, kw, stride, pad, out_pad)
    cols = np.matmul(w.reshape(cin, -1).T, x.reshape(bs, cin, h * wd))
    y = col2im(cols, (bs, cout, oh, ow), kh, kw, stride, pad)
    if b is not None:
        y = y + b[None, :, None, None]
    return y


def conv_transpose2d_backward(gy: np.ndarray, x: np.ndarray, w: np.ndarray,
                              stride: int, pad: int):
    """Gradients of conv_transpose2d.  Returns (gx, gw, gb)."""
    bs, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    gcols = im2col(gy, kh, kw, stride, pad)  # (B, Cout*k*k, H*W)
    gx = np.matmul(w.reshape(cin, -1), gcols).reshape(x.shape)
    xflat = np.ascontiguousarray(x.reshape(bs, cin, -1).transpose(1, 0, 2)).reshape(cin, -1)
    gcflat = np.ascontiguousarray(gcols.transpose(0, 2, 1)).reshape(-1, gcols.shape[1])
    gw = (xflat @ gcflat).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    return a @ b


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.square(a, dtype=np.float64)))
    return float(np.sqrt(total))
