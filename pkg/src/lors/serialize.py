"""LORS1 parameter container.

Layout, all integers little-endian u32::

    b"LORS1"
    count
    count x { name_len, name (utf-8), ndim, dims[ndim], payload (f64 LE, row-major) }
"""

from __future__ import annotations

import io
import os
import struct
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"LORS1"
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(len(items)))
    for name, arr in items:
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for extent in arr.shape:
            buf.write(_U32.pack(extent))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:5]) != MAGIC:
        raise FormatError("missing LORS1 magic")
    pos = 5

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(view):
            raise FormatError("truncated header")
        (value,) = _U32.unpack_from(view, pos)
        pos += 4
        return value

    out: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        n = u32()
        name = bytes(view[pos : pos + n]).decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(view):
            raise FormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_model(path, model) -> None:
    save(path, [(name, t.data) for name, t in model.named_parameters()])


def load_model(path, model) -> None:
    """Copy tensors from ``path`` into a model with the same parameter names and shapes."""
    stored = load(path)
    params = dict(model.named_parameters())
    if set(stored) != set(params):
        missing, extra = set(params) - set(stored), set(stored) - set(params)
        raise FormatError(f"name mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise FormatError(f"{name}: stored {stored[name].shape}, model {t.shape}")
        t.data[...] = stored[name]
