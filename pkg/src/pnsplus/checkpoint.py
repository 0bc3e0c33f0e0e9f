"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"PNSCKPT\\0"
    version u32      currently 1
    count   u32      number of records
    record  * count:
        name_len u32, name utf-8 bytes,
        ndim u32, dims u64 * ndim,
        values float64 little-endian, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PNSCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, named: list[tuple[str, np.ndarray]] | dict[str, np.ndarray]) -> None:
    items = list(named.items()) if isinstance(named, dict) else list(named)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            out[name] = arr.reshape(shape)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
