"""Flat checkpoint archive.

Layout (all integers little-endian)::

    b"VXFC"  u32 version  u32 n_arrays  u32 meta_len  meta (utf-8 JSON)
    repeated n_arrays times:
        u16 name_len  name (utf-8)  u8 ndim  u32 dim * ndim  f32 data (C order)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VXFC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", VERSION, len(arrays), len(meta_bytes)), meta_bytes]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    version, count, meta_len = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated archive at byte {off}") from exc
    return arrays, meta
