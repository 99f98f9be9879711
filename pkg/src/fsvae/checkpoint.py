"""Versioned binary checkpoint: named tensors + config snapshot, CRC-checked.

Layout (all little-endian):
    magic "FSVA" | u32 version | u32 chunk count | chunks...
Each chunk:
    u16 name length | name (utf-8) | u8 dtype code | u8 ndim | u32 dims... |
    u64 payload bytes | payload | u32 crc32(name..payload)
The config snapshot travels as a uint8 chunk named "__config__" holding JSON.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FSVA"
VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

CONFIG_CHUNK = "__config__"


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_chunk(name: str, arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype)
    if dt not in _CODES:
        raise TypeError(f"checkpoint cannot store dtype {dt} (tensor '{name}')")
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    payload = arr.tobytes()
    body = struct.pack("<H", len(nb)) + nb
    body += struct.pack("<BB", _CODES[dt], arr.ndim)
    body += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body += struct.pack("<Q", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ValueError(f"{self.path}: truncated checkpoint "
                             f"(need {self.pos + n} bytes, have {len(self.raw)})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def save_checkpoint(ckpt: Checkpoint, path: str):
    """Atomic write: temp file in the same directory, then rename."""
    chunks = [_pack_chunk(CONFIG_CHUNK,
                          np.frombuffer(json.dumps(ckpt.config).encode(), dtype=np.uint8))]
    for name in sorted(ckpt.tensors):
        chunks.append(_pack_chunk(name, ckpt.tensors[name]))
    blob = MAGIC + struct.pack("<II", VERSION, len(chunks)) + b"".join(chunks)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, n_chunks = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}, "
                         f"this build reads version {VERSION}")
    config = None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_chunks):
        start = r.pos
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2))
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code} in chunk '{name}'")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", r.take(8))
        payload = r.take(nbytes)
        body = raw[start:r.pos]
        (crc,) = struct.unpack("<I", r.take(4))
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ValueError(f"{path}: checksum failure in chunk '{name}'")
        arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
        if name == CONFIG_CHUNK:
            config = json.loads(arr.tobytes().decode("utf-8"))
        else:
            tensors[name] = arr
    if config is None:
        raise ValueError(f"{path}: checkpoint has no config chunk")
    return Checkpoint(config=config, tensors=tensors)
