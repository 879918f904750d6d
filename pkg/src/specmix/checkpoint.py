"""Versioned little-endian parameter dumps.

Layout::

    8 bytes   magic b"DSCNPP01"
    u32       format version (1)
    u32       entry count
    per entry:
      u16     name length, then UTF-8 name
      u8      ndim, then ndim x u32 extents
      float64 values, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from specmix.errors import FormatError

MAGIC = b"DSCNPP01"
VERSION = 1


def save_checkpoint(arrays: dict, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)))
        parts.append(key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:8]!r}", offset=0)
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError("truncated checkpoint", offset=pos)
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    out = {}
    for _ in range(count):
        (n,) = take("<H")
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint name", offset=pos)
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(raw):
            raise FormatError(f"truncated values for '{name}'", offset=pos)
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out
