"""``SSLKD01`` named-tensor store.

Layout (little-endian)::

    b"SSLKD01" | u32 count | count x record
    record = u16 name_len | name (utf-8) | u8 rank | rank x u32 dim | f64 payload
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SSLKD01"


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError("not an SSLKD01 checkpoint")
    try:
        pos = len(MAGIC)
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 8 * size > len(raw):
                raise FormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as e:
        raise FormatError(f"truncated checkpoint: {e}") from e
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last record")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def subset(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Entries under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def prefixed(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in tensors.items()}
