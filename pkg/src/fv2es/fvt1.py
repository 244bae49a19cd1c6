"""FVT1 binary tensor files.

Layout: ``b"FVT1"``, dtype code (u8: 0=f32, 1=f64), rank (u8), two zero
bytes, ``rank`` little-endian u32 dims, then the row-major payload in
little-endian order.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import TensorFormatError

MAGIC = b"FVT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    try:
        code = _DTYPE_CODE[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise TensorFormatError(f"FVT1 stores float32/float64 only, got {arr.dtype}") from None
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    if any(d <= 0 for d in arr.shape):
        raise TensorFormatError(f"FVT1 dims must be positive, got {arr.shape}")
    header = MAGIC + struct.pack("<BBxx", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("bad FVT1 magic")
    code, rank, r0, r1 = buf[4], buf[5], buf[6], buf[7]
    if code not in _CODES:
        raise TensorFormatError(f"unknown FVT1 dtype code {code}")
    if r0 or r1:
        raise TensorFormatError("FVT1 reserved bytes must be zero")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise TensorFormatError("truncated FVT1 header")
    shape = struct.unpack(f"<{rank}I", buf[8:end])
    if any(d == 0 for d in shape):
        raise TensorFormatError("FVT1 dims must be positive")
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - end != count * dtype.itemsize:
        raise TensorFormatError(
            f"FVT1 payload is {len(buf) - end} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())
