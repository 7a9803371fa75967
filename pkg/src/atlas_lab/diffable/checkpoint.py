"""Binary tensor container.

Layout (all integers little-endian)::

    b"ATLSCKPT"            magic, 8 bytes
    u32 version            currently 1
    u32 entry count
    per entry, in insertion order:
        u32 name length, UTF-8 name bytes
        u8  dtype tag      0 = float32, 1 = float64, 2 = int64
        u32 rank, then rank x u64 dims
        values, little-endian, C order
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATLSCKPT"
VERSION = 1
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


def _as_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def save_checkpoint(path: str | Path, tensors: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = _as_numpy(t)
            if arr.dtype not in _TAGS:
                raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not an ATLSCKPT file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        tag, rank = struct.unpack_from("<BI", data, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dtype = np.dtype(_DTYPES[tag])
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=off).reshape(dims).copy()
        off += size
    if off != len(data):
        raise ValueError(f"trailing bytes in {path}")
    return out
