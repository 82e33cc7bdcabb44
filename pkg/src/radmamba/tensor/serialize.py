"""Flat binary tensor files.

Layout (all little-endian)::

    b"RMT1" | u8 precision (0 = f32, 1 = f64) | u8 rank | rank * u32 extents | raw scalars
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

from .core import Precision, Tensor, TensorError

MAGIC = b"RMT1"
_CODES = {Precision.F32: 0, Precision.F64: 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(TensorError, ValueError):
    pass


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _CODES[Precision.from_dtype(arr.dtype)]
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an RMT1 tensor (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown precision code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != need:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {need} for shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=off).reshape(shape)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save(t: Tensor | np.ndarray, path: str | os.PathLike | BinaryIO) -> None:
    data = to_bytes(t)
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def load(path: str | os.PathLike | BinaryIO) -> Tensor:
    if hasattr(path, "read"):
        return from_bytes(path.read())
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
