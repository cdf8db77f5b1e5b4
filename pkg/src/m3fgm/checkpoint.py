"""Binary parameter container.

Layout (all integers unsigned little-endian)::

    magic   8 bytes  b"M3FGMPRM"
    version u32      1
    count   u32      number of records
    record * count:
        name_len u32, name (utf-8)
        ndim     u32, dims (u64 each)
        values   prod(dims) float64 little-endian, row-major

Records keep the model's parameter order, so save/load/save is byte-stable.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"M3FGMPRM"
VERSION = 1


def dumps(params: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ValueError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(blob):
                raise ValueError(f"record {name!r} is truncated")
            out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise ValueError("truncated parameter container") from exc
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after last record")
    return out


def save(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
