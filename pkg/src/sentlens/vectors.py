"""CLVE sentence-vector files.

Layout (little-endian): magic b"CLVE" | u32 version=1 | u32 D | u64 N,
then per record u64 id + D float32. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .corpus import (
    BadMagicError,
    CorpusFormatError,
    DimensionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    _Cursor,
    _read_exact,
)

__all__ = ["write_vectors", "read_vectors"]

CLVE_MAGIC = b"CLVE"
CLVE_VERSION = 1


def write_vectors(path, ids, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    ids = list(ids)
    if matrix.ndim != 2 or len(ids) != matrix.shape[0]:
        raise DimensionMismatchError(
            f"need one id per row: {len(ids)} ids, matrix {matrix.shape}")
    with open(path, "wb") as f:
        f.write(CLVE_MAGIC)
        f.write(struct.pack("<IIQ", CLVE_VERSION, matrix.shape[1], matrix.shape[0]))
        for rid, row in zip(ids, matrix):
            f.write(struct.pack("<Q", rid))
            f.write(row.astype("<f4", copy=False).tobytes())


def read_vectors(path):
    path = Path(path)
    f = _Cursor(path.read_bytes())
    magic = f.take(4, "magic") if len(f.data) >= 4 else f.data
    if magic != CLVE_MAGIC:
        raise BadMagicError(f"{path.name}: expected CLVE magic, got {magic!r}")
    version, dim, count = struct.unpack("<IIQ", _read_exact(f, 16, "header"))
    if version != CLVE_VERSION:
        raise VersionMismatchError(f"{path.name}: version {version}")
    if dim == 0:
        raise DimensionMismatchError(f"{path.name}: dimension 0")
    # records are fixed-size: validate the claimed count before allocating
    if len(f.data) - f.pos != count * (8 + 4 * dim):
        raise TruncatedFileError(f"{path.name}: size does not match {count} records")
    ids = []
    matrix = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        rid, = struct.unpack("<Q", _read_exact(f, 8, f"record {i} id"))
        raw = _read_exact(f, 4 * dim, f"record {i} payload")
        ids.append(rid)
        matrix[i] = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(matrix)):
        raise CorpusFormatError(f"{path.name}: non-finite vector values")
    return ids, matrix
