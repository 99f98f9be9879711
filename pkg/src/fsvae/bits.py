"""Packed binary tensor for spike trains."""

from __future__ import annotations

import numpy as np


class BitTensor:
    """Binary values packed 8-per-byte.  Lossless round trip with any array
    whose values are exactly 0 or 1."""

    def __init__(self, shape: tuple[int, ...], packed: np.ndarray):
        self.shape = tuple(int(s) for s in shape)
        self.packed = np.asarray(packed, dtype=np.uint8)
        n = int(np.prod(self.shape)) if self.shape else 1
        if self.packed.size != (n + 7) // 8:
            raise ValueError(
                f"packed length {self.packed.size} does not match shape {self.shape}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BitTensor":
        arr = np.asarray(arr)
        flat = arr.reshape(-1)
        if not np.all((flat == 0) | (flat == 1)):
            raise ValueError("BitTensor requires values in {0, 1}")
        return cls(arr.shape, np.packbits(flat.astype(np.uint8)))

    def to_array(self, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(self.shape)) if self.shape else 1
        bits = np.unpackbits(self.packed, count=n)
        return bits.reshape(self.shape).astype(dtype)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __eq__(self, other) -> bool:
        return (isinstance(other, BitTensor) and self.shape == other.shape
                and np.array_equal(self.packed, other.packed))

    def __repr__(self):
        return f"BitTensor(shape={self.shape})"
