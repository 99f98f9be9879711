"""Dataset ingestion and image I/O: IDX parsing, resize/normalize, PGM grids,
and a deterministic synthetic-digits generator for offline runs."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"


def default_data_dir() -> str:
    return os.environ.get("FSVAE_DATA_DIR", "data")


@dataclass
class IdxDataset:
    images: np.ndarray            # (N, H, W) uint8
    labels: np.ndarray | None = None


def load_idx(path: str) -> IdxDataset:
    """Parse a big-endian IDX image file (magic 0x803)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX file ({len(raw)} bytes, need >= 4)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: is a label file (magic 0x{magic:08x}), expected images")
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header ({len(raw)} bytes, need >= 16)")
    count, rows, cols = struct.unpack(">III", raw[4:16])
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count}x{rows}x{cols}, "
                         f"got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    return IdxDataset(images=images)


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX label file")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) != 8 + count:
        raise ValueError(f"{path}: expected {8 + count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx(images: np.ndarray, path: str):
    """Write (N, H, W) uint8 images as a big-endian IDX file."""
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def bilinear_resize(images: np.ndarray, target: int) -> np.ndarray:
    """Batched bilinear resize of (N, H, W) float arrays to (N, target, target)."""
    n, h, w = images.shape
    ys = (np.arange(target) + 0.5) * (h / target) - 0.5
    xs = (np.arange(target) + 0.5) * (w / target) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    g = images[:, y0[:, None], x0[None, :]] * (1 - wy) * (1 - wx) \
        + images[:, y0[:, None], x1[None, :]] * (1 - wy) * wx \
        + images[:, y1[:, None], x0[None, :]] * wy * (1 - wx) \
        + images[:, y1[:, None], x1[None, :]] * wy * wx
    return g


def preprocess(images: np.ndarray, target: int = 32) -> np.ndarray:
    """uint8 (N, H, W) -> float32 (N, 1, target, target) in [-1, 1]."""
    x = bilinear_resize(images.astype(np.float64), target)
    x = x / 127.5 - 1.0
    return np.clip(x, -1.0, 1.0).astype(np.float32)[:, None]


# ---- PGM output ------------------------------------------------------------

def write_image_grid(images: np.ndarray, path: str, cols: int | None = None):
    """Write a row-major grid of [-1,1] grayscale images as binary PGM (P5)."""
    if images.ndim == 4:
        images = images[:, 0]
    n, h, w = images.shape
    if n == 0:
        raise ValueError("refusing to write an empty image grid")
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h, cols * w), dtype=np.float32) - 1.0
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i]
    pixels = np.clip((canvas + 1.0) * 127.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) back as a uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = parts[3]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---- synthetic digits ------------------------------------------------------

# Digit strokes as polylines in a unit box (x right, y down).
_STROKES = {
    0: [[(0.5, 0.05), (0.85, 0.3), (0.85, 0.7), (0.5, 0.95), (0.15, 0.7),
         (0.15, 0.3), (0.5, 0.05)]],
    1: [[(0.35, 0.25), (0.55, 0.05), (0.55, 0.95)]],
    2: [[(0.15, 0.25), (0.5, 0.05), (0.85, 0.3), (0.2, 0.95), (0.85, 0.95)]],
    3: [[(0.2, 0.1), (0.8, 0.1), (0.45, 0.45), (0.85, 0.7), (0.5, 0.95), (0.15, 0.8)]],
    4: [[(0.7, 0.95), (0.7, 0.05), (0.15, 0.65), (0.9, 0.65)]],
    5: [[(0.8, 0.05), (0.2, 0.05), (0.2, 0.45), (0.7, 0.5), (0.8, 0.75),
         (0.5, 0.95), (0.15, 0.85)]],
    6: [[(0.7, 0.05), (0.3, 0.4), (0.2, 0.75), (0.5, 0.95), (0.8, 0.75),
         (0.6, 0.5), (0.25, 0.6)]],
    7: [[(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]],
    8: [[(0.5, 0.5), (0.8, 0.3), (0.5, 0.05), (0.2, 0.3), (0.5, 0.5),
         (0.8, 0.75), (0.5, 0.95), (0.2, 0.75), (0.5, 0.5)]],
    9: [[(0.75, 0.4), (0.4, 0.5), (0.25, 0.25), (0.55, 0.05), (0.75, 0.25),
         (0.75, 0.6), (0.5, 0.95)]],
}


def _render_digit(digit: int, rng: RngStream, size: int = 28) -> np.ndarray:
    scale = 0.75 + 0.3 * rng.uniform()
    angle = (rng.uniform() - 0.5) * 0.45
    dx = (rng.uniform() - 0.5) * 4.0
    dy = (rng.uniform() - 0.5) * 4.0
    ca, sa = np.cos(angle), np.sin(angle)
    canvas = np.zeros((size, size), dtype=np.float64)
    box = size * 0.72
    off = size * 0.14
    for stroke in _STROKES[digit]:
        pts = np.array(stroke, dtype=np.float64)
        pts = (pts - 0.5) * scale
        pts = pts @ np.array([[ca, sa], [-sa, ca]])
        pts = (pts + 0.5) * box + off + np.array([dx, dy])
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            length = float(np.hypot(x1 - x0, y1 - y0))
            npts = max(int(length / 0.3), 2)
            ts = np.linspace(0.0, 1.0, npts)
            xs = x0 + (x1 - x0) * ts
            ys = y0 + (y1 - y0) * ts
            xi = np.clip(np.round(xs).astype(int), 0, size - 1)
            yi = np.clip(np.round(ys).astype(int), 0, size - 1)
            canvas[yi, xi] = 1.0
    canvas = gaussian_filter(canvas, sigma=0.9)
    peak = canvas.max()
    if peak > 0:
        canvas = np.clip(canvas / peak * 1.6, 0.0, 1.0)
    return (canvas * 255.0).astype(np.uint8)


def make_synthetic_digits(n: int, seed: int) -> IdxDataset:
    """Deterministic digit-like grayscale images (28x28) for offline use."""
    rng = RngStream(seed).child(77)
    images = np.empty((n, 28, 28), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        digit = i % 10
        images[i] = _render_digit(digit, rng.child(i))
        labels[i] = digit
    return IdxDataset(images=images, labels=labels)


def load_train_eval(data_dir: str, train_count: int = 0, eval_count: int = 0):
    """Load train/eval IDX images from data_dir; optional head subsets."""
    train = load_idx(os.path.join(data_dir, TRAIN_IMAGES)).images
    test_path = os.path.join(data_dir, TEST_IMAGES)
    if os.path.exists(test_path):
        evals = load_idx(test_path).images
    else:
        # no held-out file: split off the tail of the training set
        cut = max(len(train) * 9 // 10, 1)
        train, evals = train[:cut], train[cut:]
    if train_count:
        train = train[:train_count]
    if eval_count:
        evals = evals[:eval_count]
    return train, evals
