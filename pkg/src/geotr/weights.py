"""Binary weights container.

Layout (all little-endian)::

    b"GEOW"  u32 version  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 rank, u32 extent * rank, f64 payload

Entries are written in mapping order and read back in file order, so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"GEOW"
VERSION = 1


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise DataError(f"entry {name!r} has rank {arr.ndim}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise DataError("not a weights file (bad magic)")
    if len(buf) < 12:
        raise DataError("weights file header is truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported weights version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            payload = buf[pos : pos + 8 * size]
            if len(payload) != 8 * size:
                raise DataError(f"entry {name!r} is truncated")
            pos += 8 * size
            out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise DataError(f"weights file is truncated: {exc}") from None
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
