"""CMAT1 matrix files: magic, u32 rows, u32 cols, then rows*cols little-endian fp64 values row-major."""

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import FormatError, NumericError, ShapeError

MAGIC = b'CMAT1'
HEADER = struct.Struct('<5sII')


def encode(m: np.ndarray) -> bytes:
    """
    Serialise one matrix as a CMAT1 blob.

    Raises:
        ShapeError: if `m` is not 2-D
        NumericError: if `m` has NaN or infinite entries
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f'CMAT1 stores 2-D matrices, got shape {m.shape}')
    if not np.all(np.isfinite(m)):
        raise NumericError('refusing to store non-finite matrix')
    return HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + m.astype('<f8').tobytes(order='C')


def _read_one(f: BinaryIO, path) -> np.ndarray | None:
    head = f.read(HEADER.size)
    if not head:
        return None
    if len(head) != HEADER.size:
        raise FormatError(f'{path}: truncated CMAT1 header')
    magic, rows, cols = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f'{path}: bad CMAT1 magic {magic!r}')
    body = f.read(rows * cols * 8)
    if len(body) != rows * cols * 8:
        raise FormatError(f'{path}: truncated CMAT1 body')
    return np.frombuffer(body, dtype='<f8').astype(np.float64).reshape(rows, cols)


def write_cmat(path: Path | str, m: np.ndarray):
    """
    Write a single matrix to `path`, replacing any existing file.

    Raises:
        ShapeError: if `m` is not 2-D
        NumericError: if `m` has NaN or infinite entries
    """
    Path(path).write_bytes(encode(m))


def read_cmat(path: Path | str) -> np.ndarray:
    """
    Read the first matrix stored at `path`.

    Raises:
        FormatError: if the file is empty, truncated or does not start with the CMAT1 magic
    """
    with open(path, 'rb') as f:
        m = _read_one(f, path)
    if m is None:
        raise FormatError(f'{path} is empty')
    return m


def write_cmat_stack(path: Path | str, matrices: Iterable[np.ndarray]):
    """Write matrices as concatenated CMAT1 blobs."""
    with open(path, 'wb') as f:
        for m in matrices:
            f.write(encode(m))


def read_cmat_stack(path: Path | str) -> list[np.ndarray]:
    """Read every blob of a concatenated file in order; an empty file gives an empty list."""
    out = []
    with open(path, 'rb') as f:
        while (m := _read_one(f, path)) is not None:
            out.append(m)
    return out
