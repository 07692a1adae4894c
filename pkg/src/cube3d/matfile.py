"""Little-endian binary matrix files.

Header: magic ``b"CUBE3D\\0"``, u8 version (1), u8 dtype (0 = float64,
1 = float32), u64 rows, u64 cols; then rows*cols scalars in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CUBE3D\0"
VERSION = 1
_HEADER = struct.Struct("<7sBBQQ")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class MatrixFileError(ValueError):
    pass


def dumps(m: np.ndarray) -> bytes:
    m = np.asarray(m)
    if m.ndim != 2:
        raise MatrixFileError(f"need a 2-D matrix, got shape {m.shape}")
    try:
        code = _CODES[m.dtype]
    except KeyError:
        raise MatrixFileError(f"unsupported dtype {m.dtype}") from None
    rows, cols = m.shape
    body = np.ascontiguousarray(m, dtype=_DTYPES[code]).tobytes()
    return _HEADER.pack(MAGIC, VERSION, code, rows, cols) + body


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise MatrixFileError("truncated header")
    magic, version, code, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MatrixFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MatrixFileError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise MatrixFileError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    need = _HEADER.size + rows * cols * dt.itemsize
    if len(buf) != need:
        raise MatrixFileError(f"expected {need} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype=dt, offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(dt.newbyteorder("="), copy=True)


def save(path: str | Path, m: np.ndarray) -> None:
    Path(path).write_bytes(dumps(m))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
