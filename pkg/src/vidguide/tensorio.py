"""Binary tensor files shared across the package.

Layout, all integers little-endian: magic ``b"FRTF"`` (frame tensor
format), u32 version (= 1), u32 dtype code (0 = float32, 1 = float64),
u32 ndim, ndim u32 dims, then the row-major payload.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FRTF"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    """Raised for malformed tensor files."""


def write_tensor(path, array) -> None:
    """Write ``array`` to ``path``; non-float inputs are stored as float64."""
    arr = np.asarray(array)
    if arr.dtype not in _CODE_BY_DTYPE:
        arr = arr.astype(np.float64)
    code = _CODE_BY_DTYPE[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, code, arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise TensorFormatError(f"{path}: truncated header")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if ndim > 16:
        raise TensorFormatError(f"{path}: implausible ndim {ndim}")
    offset = 16
    dims = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
    offset += 4 * ndim
    dtype = _DTYPE_BY_CODE[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise TensorFormatError(
            f"{path}: payload length {len(raw) - offset} does not match dims {dims}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
