"""The PWGT weight file: named float32 tensors with a trailing FNV-1a hash.

Layout (little-endian)::

    b"PWGT" | u8 version=1 | u32 count
    per tensor: u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | f32 data
    u64 FNV-1a of every preceding byte
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"PWGT"
VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class WeightFileError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def loads(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 17 or data[:4] != MAGIC:
        raise WeightFileError("not a PWGT weight file")
    if data[4] != VERSION:
        raise WeightFileError(f"unsupported PWGT version {data[4]}")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise WeightFileError("weight file hash mismatch")
    (count,) = struct.unpack_from("<I", body, 5)
    pos = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rank = body[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(body):
                raise WeightFileError(f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise WeightFileError(f"truncated weight file: {exc}") from exc
    if pos != len(body):
        raise WeightFileError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def file_hash(data: bytes) -> bytes:
    """The stored 8-byte trailer, used as a content fingerprint."""
    return data[-8:]


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> bytes:
    data = dumps(tensors)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"weight file not found: {path}")
    with open(path, "rb") as fh:
        return loads(fh.read())
