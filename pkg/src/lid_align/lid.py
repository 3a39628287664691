"""Maximum-likelihood LID estimation and the image/patch alignment losses.

The estimator for a query with sorted neighbor distances r_1 <= ... <= r_k is

    LID = -( (1/k) * sum_i ln(r_i / r_k) )^-1

with r_max taken as r_k, so the last summand is always zero and k >= 2 is
required. iLID applies it to an original image's features against the
generated batch; pLID applies it to one original feature patch against the
patches of the restored region.

Gradients treat the neighbor set and its ranking as fixed for one
evaluation. With S = sum_i ln(r_i / r_k):

    dLID/dr_j = (k / S^2) / r_j                 for j < k
    dLID/dr_k = -(k / S^2) * (k - 1) / r_k
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .knn import NeighborList, neighbors, neighbors_batch, pairwise_distances, rank_rows

TIE_TOL = 1e-9


class LidError(ValueError):
    """The estimator is undefined for the given neighborhood."""


class ZeroDistanceError(LidError):
    pass


class DegenerateNeighborhoodError(LidError):
    pass


@dataclass(frozen=True)
class LidEstimate:
    value: float
    k: int
    neighbor_distances: NeighborList


@dataclass(frozen=True)
class LidGradient:
    """Gradient of one LID score with the neighborhood held fixed.

    ``ref_grads`` has one row per reference vector; rows of non-neighbors
    are zero. ``boundary_tie`` marks a non-differentiable point: a distance
    tie at rank k-1/k or k/k+1.
    """

    value: float
    indices: np.ndarray
    ref_grads: np.ndarray
    query_grad: np.ndarray
    boundary_tie: bool


def _check_rows(dist: np.ndarray) -> None:
    if dist.shape[1] < 2:
        raise LidError(f"LID needs k >= 2 neighbors, got k={dist.shape[1]}")
    if np.any(dist[:, 0] <= 0.0):
        raise ZeroDistanceError("a neighbor coincides with the query (zero distance)")


def _row_sums(x: np.ndarray) -> np.ndarray:
    # column-sequential so a row's sum does not depend on how many rows there are
    s = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        s += x[:, j]
    return s


def _log_ratio_sums(dist: np.ndarray) -> np.ndarray:
    _check_rows(dist)
    S = _row_sums(np.log(dist / dist[:, -1:]))
    if np.any(S == 0.0):
        raise DegenerateNeighborhoodError("all k neighbors are equidistant; LID is unbounded")
    return S


def lid_rows(dist) -> np.ndarray:
    """MLE LID for each row of an (n, k) array of ascending neighbor distances."""
    dist = np.atleast_2d(np.asarray(dist, dtype=np.float64))
    k = dist.shape[1]
    return -1.0 / (_log_ratio_sums(dist) / k)


def lid_mle(nl: NeighborList) -> LidEstimate:
    value = float(lid_rows(nl.distances[None, :])[0])
    return LidEstimate(value=value, k=nl.k, neighbor_distances=nl)


def _vectors(s) -> np.ndarray:
    v = np.asarray(getattr(s, "vectors", s), dtype=np.float64)
    if v.size == 0:
        return v.reshape(0, 0)
    return v.reshape(v.shape[0], -1)


def ilid(y_feat, Z_feats, k_I: int) -> LidEstimate:
    """LID of an original feature vector against the generated feature set."""
    return lid_mle(neighbors(np.ravel(y_feat), _vectors(Z_feats), k_I))


def plid(p, Q, k_P: int) -> LidEstimate:
    """LID of one original feature patch against the restored-region patches."""
    return lid_mle(neighbors(np.ravel(p), _vectors(Q), k_P))


def lid_values(queries, refs, k: int) -> np.ndarray:
    """Per-query LID of every row of ``queries`` against ``refs`` (no self exclusion)."""
    dist, _ = neighbors_batch(_vectors(queries), _vectors(refs), k)
    return lid_rows(dist)


def ilid_loss(Y_feats, Z_feats, k_I: int) -> float:
    Y = _vectors(Y_feats)
    if Y.shape[0] == 0:
        raise ValueError("empty original batch")
    return float(np.mean(lid_values(Y, Z_feats, k_I)))


def plid_loss(P_sets, Q_sets, k_P: int) -> float:
    if len(P_sets) != len(Q_sets):
        raise ValueError(f"{len(P_sets)} P sets but {len(Q_sets)} Q sets")
    if not P_sets:
        raise ValueError("no images")
    per_image = []
    for i, (P, Q) in enumerate(zip(P_sets, Q_sets)):
        P = _vectors(P)
        if P.shape[0] == 0:
            raise ValueError(f"image {i}: empty P patch set")
        per_image.append(float(np.mean(lid_values(P, Q, k_P))))
    return float(np.mean(per_image))


def _grad_core(queries: np.ndarray, refs: np.ndarray, k: int):
    """Per-query LID values with the distance derivatives of each.

    Returns ``(values, idx, coef, dist, ties)`` where idx and dist are the
    ranked neighbors and coef[i, j] = dLID_i / d dist[i, j].
    """
    full = pairwise_distances(queries, refs)
    dist, idx = rank_rows(full, k)
    S = _log_ratio_sums(dist)
    values = -1.0 / (S / k)
    scale = k / (S * S)
    coef = scale[:, None] / dist
    coef[:, -1] = -scale * (k - 1) / dist[:, -1]
    ties = np.abs(dist[:, -1] - dist[:, -2]) < TIE_TOL
    if refs.shape[0] > k:
        nxt = np.sort(full, axis=1)[:, k]
        ties |= np.abs(nxt - dist[:, -1]) < TIE_TOL
    return values, idx, coef, dist, ties


def lid_gradient(query, refs, k: int) -> LidGradient:
    q = np.ravel(np.asarray(query, dtype=np.float64))[None, :]
    R = _vectors(refs)
    values, idx, coef, dist, ties = _grad_core(q, R, k)
    diff = R[idx[0]] - q  # (k, d)
    unit = diff / dist[0][:, None]
    ref_grads = np.zeros_like(R)
    ref_grads[idx[0]] = coef[0][:, None] * unit
    query_grad = -(coef[0][:, None] * unit).sum(axis=0)
    return LidGradient(float(values[0]), idx[0], ref_grads, query_grad, bool(ties[0]))


def ilid_gradient(y_feat, Z_feats, k_I: int) -> LidGradient:
    """d iLID / d z for every generated feature vector z (zero for non-neighbors)."""
    return lid_gradient(y_feat, Z_feats, k_I)


def plid_gradient(p, Q, k_P: int) -> LidGradient:
    return lid_gradient(p, Q, k_P)


def mean_lid_ref_grad(queries, refs, k: int):
    """Mean LID over ``queries`` and its gradient with respect to ``refs``.

    Returns ``(mean_value, grad_refs, n_ties)``.
    """
    Qs = _vectors(queries)
    R = _vectors(refs)
    values, idx, coef, dist, ties = _grad_core(Qs, R, k)
    n = Qs.shape[0]
    diff = R[idx] - Qs[:, None, :]  # (n, k, d)
    contrib = (coef / dist)[:, :, None] * diff / n
    grad = np.zeros_like(R)
    np.add.at(grad, idx.ravel(), contrib.reshape(-1, R.shape[1]))
    return float(np.mean(values)), grad, int(np.count_nonzero(ties))


def ilid_loss_grad(Y_feats, Z_feats, k_I: int):
    """``ilid_loss`` together with its gradient with respect to the generated features."""
    value, grad, _ = mean_lid_ref_grad(Y_feats, Z_feats, k_I)
    return value, grad


def plid_loss_grad(P_sets, Q_sets, k_P: int):
    """``plid_loss`` together with per-image gradients with respect to each Q set."""
    if len(P_sets) != len(Q_sets):
        raise ValueError(f"{len(P_sets)} P sets but {len(Q_sets)} Q sets")
    if not P_sets:
        raise ValueError("no images")
    per_image, grads = [], []
    n = len(P_sets)
    for P, Q in zip(P_sets, Q_sets):
        value, grad, _ = mean_lid_ref_grad(P, Q, k_P)
        per_image.append(value)
        grads.append(grad / n)
    return float(np.mean(per_image)), grads
