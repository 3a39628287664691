"""Exact brute-force k-nearest-neighbor search."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import squared_distances

_THREADS = 1
_CHUNK_ROWS = 256


def set_threads(n: int) -> None:
    """Set how many worker threads ``pairwise_distances`` may use."""
    global _THREADS
    if n < 1:
        raise ValueError("thread count must be positive")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


@dataclass(frozen=True)
class NeighborList:
    distances: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if len(self.distances) != len(self.indices):
            raise ValueError("distances and indices differ in length")
        if np.any(np.diff(self.distances) < 0):
            raise ValueError("neighbor distances must be sorted ascending")

    @property
    def k(self) -> int:
        return len(self.distances)

    @property
    def r_max(self) -> float:
        return float(self.distances[-1])


def _as_ref_set(refs) -> np.ndarray:
    arr = np.asarray(refs, dtype=np.float64)
    if arr.ndim == 1:
        # a flat list of scalars is a set of 1-D points
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def pairwise_distances(A, B) -> np.ndarray:
    """Euclidean distance matrix, entry (i, j) == l2_distance(A[i], B[j])."""
    A = _as_ref_set(A)
    B = _as_ref_set(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if _THREADS == 1 or A.shape[0] <= _CHUNK_ROWS:
        return np.sqrt(squared_distances(A, B))
    starts = range(0, A.shape[0], _CHUNK_ROWS)
    with ThreadPoolExecutor(max_workers=_THREADS) as pool:
        blocks = list(pool.map(lambda s: squared_distances(A[s:s + _CHUNK_ROWS], B), starts))
    return np.sqrt(np.concatenate(blocks, axis=0))


def rank_rows(dist: np.ndarray, k: int, exclude: np.ndarray | None = None):
    """Select the k nearest columns of each row of a distance matrix.

    Ties are broken by ascending column index. ``exclude`` optionally gives one
    column per row to drop (use -1 for none). Returns ``(distances, indices)``
    of shape (n, k).
    """
    dist = np.array(dist, dtype=np.float64, copy=True)
    n, m = dist.shape
    available = m - (1 if exclude is not None and np.any(exclude >= 0) else 0)
    if k < 1:
        raise ValueError("k must be positive")
    if k > available:
        raise ValueError(f"k={k} exceeds the {available} available reference points")
    if exclude is not None:
        rows = np.nonzero(exclude >= 0)[0]
        dist[rows, exclude[rows]] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(dist, order, axis=1), order


def neighbors(query, refs, k: int, exclude_self: bool = False,
              self_index: int | None = None) -> NeighborList:
    """k nearest references of ``query``, ascending, ties by reference index.

    With ``exclude_self`` one reference at distance exactly 0 is skipped: the
    one at ``self_index`` if given, otherwise the lowest-indexed zero-distance
    reference. This is the X minus {x} convention of the LID estimator.
    """
    R = _as_ref_set(refs)
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != R.shape[1]:
        raise ValueError(f"dimension mismatch: query has {q.shape[1]}, refs have {R.shape[1]}")
    d = pairwise_distances(q, R)
    skip = np.array([-1])
    if exclude_self:
        if self_index is not None:
            if d[0, self_index] != 0.0:
                raise ValueError(f"reference {self_index} is not the query (distance {d[0, self_index]})")
            skip[0] = self_index
        else:
            zeros = np.flatnonzero(d[0] == 0.0)
            if len(zeros):
                skip[0] = zeros[0]
    dist, idx = rank_rows(d, k, skip if skip[0] >= 0 else None)
    return NeighborList(dist[0], idx[0])


def neighbors_batch(queries, refs, k: int, exclude: np.ndarray | None = None):
    """Row-wise ``neighbors`` for many queries at once; returns (distances, indices)."""
    return rank_rows(pairwise_distances(queries, refs), k, exclude)
