"""Flat binary weight container.

Layout (all integers little-endian)::

    b"MSTN1"
    repeated until EOF:
        u32   name length in bytes
        bytes UTF-8 name
        u32   rank
        u64   extent, rank times
        f32   values, C order, product(extents) of them

Values are always stored as 32-bit floats; 64-bit models are narrowed on
save.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import WeightsError

MAGIC = b"MSTN1"


def record_size(name: str, shape: tuple) -> int:
    return 4 + len(name.encode("utf-8")) + 4 + 8 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def container_size(shapes: Mapping[str, tuple]) -> int:
    return len(MAGIC) + sum(record_size(n, s) for n, s in shapes.items())


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise WeightsError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(blob)
    try:
        while pos < end:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > end:
                raise WeightsError(f"truncated record {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightsError(f"corrupt weight container at byte {pos}: {exc}") from None
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> int:
    blob = encode(arrays)
    Path(path).write_bytes(blob)
    return len(blob)


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WeightsError(f"cannot read weights: {exc}") from None
    return decode(blob)
