"""PIPW weight files.

Layout (little-endian): magic ``PIPW``, version u32, tensor count u32, then
for each tensor: name length u32, UTF-8 name, rank u32, rank x u32 dims,
float32 payload in row-major order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PIPW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise WeightFormatError("not a PIPW file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported PIPW version {version}")
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise WeightFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise WeightFormatError(f"truncated PIPW file: {exc}") from None
    if pos != len(buf):
        raise WeightFormatError("trailing bytes after last tensor")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
