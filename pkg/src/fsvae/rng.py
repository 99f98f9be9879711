"""Counter-based splittable random number generator.

Every draw is a pure function of (seed, stream, counter), so any sequence can
be replayed exactly and child streams are independent of how far the parent
has advanced.  The mixing function is the SplitMix64 finalizer applied twice,
which is more than enough for the uniformity our sampling needs.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0xD6E8FEB86659FD93)

_F53 = float(2.0 ** -53)


def _mix(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer (vectorized over uint64 arrays)."""
    with np.errstate(over="ignore"):
        x = np.uint64(x) if np.isscalar(x) else x
        x ^= x >> np.uint64(30)
        x = (x * _M1) & _MASK
        x ^= x >> np.uint64(27)
        x = (x * _M2) & _MASK
        x ^= x >> np.uint64(31)
    return x


class RngStream:
    """Deterministic stream of random words addressed by a 64-bit counter."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter) & 0xFFFFFFFFFFFFFFFF

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def child(self, stream_id: int) -> "RngStream":
        """Derive an independent stream.  Does not touch this stream's counter."""
        with np.errstate(over="ignore"):
            base = np.uint64(self.stream)
            salt = (np.uint64(int(stream_id) & 0xFFFFFFFFFFFFFFFF) * _STREAM_SALT) & _MASK
            derived = _mix((base + salt + np.uint64(1)) & _MASK)
        return RngStream(self.seed, int(derived), 0)

    def _words(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words; advances the counter by n."""
        with np.errstate(over="ignore"):
            idx = (np.uint64(self.counter) + np.arange(n, dtype=np.uint64)) & _MASK
            x = (idx * _GAMMA) & _MASK
            x ^= _mix(np.uint64(self.seed))
            x = (x + _mix(np.uint64(self.stream) ^ _STREAM_SALT)) & _MASK
            out = _mix(_mix(x))
        self.counter = (self.counter + n) & 0xFFFFFFFFFFFFFFFF
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform floats in [0, 1), shape-valued."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * _F53
        return u.reshape(shape) if shape else float(u[0])

    def uniform_int(self, n: int) -> int:
        """One uniform integer in [0, n)."""
        if n < 1:
            raise ValueError(f"uniform_int needs n >= 1, got {n}")
        return int(self._words(1)[0] % np.uint64(n))

    def uniform_ints(self, n: int, shape) -> np.ndarray:
        """Array of uniform integers in [0, n)."""
        if n < 1:
            raise ValueError(f"uniform_ints needs n >= 1, got {n}")
        count = int(np.prod(shape))
        return (self._words(count) % np.uint64(n)).astype(np.int64).reshape(shape)

    def shuffle_index(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of random keys)."""
        keys = self._words(n)
        return np.argsort(keys, kind="stable")
