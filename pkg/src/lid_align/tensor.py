"""Dense float32 tensors, deterministic distances and the ``.dt`` file format.

Tensors are plain numpy arrays. Anything stored on disk is float32; arithmetic
that feeds k-NN statistics runs in float64 with a fixed summation order so that
neighbor rankings are reproducible across runs.

File layout (all integers little-endian)::

    magic     4 bytes   b"DTNS"
    version   1 byte    currently 1
    ndim      uint64
    extents   ndim x uint64
    payload   prod(extents) x float32, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"DTNS"
VERSION = 1
EXTENSION = ".dt"

_U64 = struct.Struct("<Q")


class TensorFormatError(ValueError):
    """Base class for problems reading a ``.dt`` file."""


class MalformedHeaderError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


def as_tensor(values, *, allow_nonfinite: bool = False) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float32 array with positive extents."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(n <= 0 for n in arr.shape):
        raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def squared_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between rows of ``A`` (n, d) and ``B`` (m, d).

    Accumulates in float64, one coordinate at a time in flat-index order, so
    every entry is computed by the same sequence of operations regardless of
    the matrix sizes. Memory is O(n*m).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("expected two 2-D arrays of row vectors")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    acc = np.zeros((A.shape[0], B.shape[0]), dtype=np.float64)
    for j in range(A.shape[1]):
        diff = A[:, j, None] - B[None, :, j]
        acc += diff * diff
    return acc


def l2_distance(a, b) -> float:
    """Euclidean distance between two tensors of identical shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(squared_distances(a.reshape(1, -1), b.reshape(1, -1))[0, 0]))


def save_tensor(t, path: str | os.PathLike) -> None:
    arr = as_tensor(t)
    header = bytearray(MAGIC)
    header.append(VERSION)
    header += _U64.pack(arr.ndim)
    for n in arr.shape:
        header += _U64.pack(n)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_tensor(blob, source=str(path))


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 5 or blob[:4] != MAGIC:
        raise MalformedHeaderError(f"{source}: missing DTNS magic")
    if blob[4] != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {blob[4]}")
    pos = 5
    if len(blob) < pos + 8:
        raise MalformedHeaderError(f"{source}: header ends before ndim")
    (ndim,) = _U64.unpack_from(blob, pos)
    pos += 8
    if ndim == 0 or len(blob) < pos + 8 * ndim:
        raise MalformedHeaderError(f"{source}: bad or truncated shape list (ndim={ndim})")
    shape = [_U64.unpack_from(blob, pos + 8 * i)[0] for i in range(ndim)]
    pos += 8 * ndim
    if any(n == 0 for n in shape):
        raise MalformedHeaderError(f"{source}: zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.uint64))
    payload = blob[pos:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"{source}: shape {shape} needs {count} values, file holds {len(payload) // 4}"
        )
    if len(payload) > 4 * count:
        raise MalformedHeaderError(f"{source}: {len(payload) - 4 * count} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.astype(np.float32).reshape(shape)
