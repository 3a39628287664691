"""Reconstruction, WGAN-GP adversarial and combined training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TERMS = ("ilid", "plid", "adv", "rec")


class NonFiniteLossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_I: float = 0.01
    lambda_P: float = 0.1
    lambda_A: float = 0.01
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda_I", "lambda_P", "lambda_A", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    total: float
    rec: float
    adv: float
    ilid: float
    plid: float

    def decomposition_error(self, w: LossWeights) -> float:
        """Relative gap between ``total`` and the weighted sum of the parts."""
        expected = w.lambda_I * self.ilid + w.lambda_P * self.plid + w.lambda_A * self.adv + self.rec
        return abs(self.total - expected) / max(abs(expected), 1e-300)


def total_loss(parts, w: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of the loss terms; the reconstruction term has weight 1.

    ``parts`` maps each of ``ilid``, ``plid``, ``adv``, ``rec`` to a value.
    Missing terms count as zero.
    """
    vals = {}
    for term in TERMS:
        v = float(parts.get(term, 0.0))
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss term {term!r} is not finite ({v})")
        vals[term] = v
    total = (w.lambda_I * vals["ilid"] + w.lambda_P * vals["plid"]
             + w.lambda_A * vals["adv"] + vals["rec"])
    return LossReport(total=total, **vals)


def _per_sample_residual(x_hat, y, batched):
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape} vs {y.shape}")
    r = x_hat - y
    return r.reshape(len(r), -1) if batched else r.reshape(1, -1)


def rec_loss(x_hat, y, batched: bool = False) -> float:
    """L2 norm of x_hat - y; with ``batched`` the mean of per-sample norms over axis 0."""
    r = _per_sample_residual(x_hat, y, batched)
    return float(np.mean(np.sqrt(np.sum(r * r, axis=1))))


def rec_loss_grad(x_hat, y, batched: bool = False):
    """``rec_loss`` and its gradient with respect to ``x_hat`` (zero where the residual vanishes)."""
    shape = np.shape(x_hat)
    r = _per_sample_residual(x_hat, y, batched)
    norms = np.sqrt(np.sum(r * r, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    grad = r / safe[:, None] / len(r)
    grad[norms == 0] = 0.0
    return float(np.mean(norms)), grad.reshape(shape)


@dataclass(frozen=True)
class CriticDiagnostics:
    wasserstein: float  # E[D(fake)] - E[D(real)]
    penalty: float  # lambda_gp * E[(||grad|| - 1)^2]
    grad_norms: np.ndarray
    x_hat: np.ndarray


def random_interpolates(real, fake, rng: np.random.Generator) -> np.ndarray:
    real = np.asarray(real, dtype=np.float64)
    t = rng.random(len(real)).reshape(-1, *([1] * (real.ndim - 1)))
    return t * real + (1.0 - t) * np.asarray(fake, dtype=np.float64)


def adv_critic_loss(D, real, fake, x_hat, lambda_gp: float = 10.0,
                    interpolant: str = "composite", rng: np.random.Generator | None = None):
    """Critic objective E[D(fake)] - E[D(real)] + lambda_gp * E[(||grad D(x_hat)|| - 1)^2].

    By default the penalty is evaluated at the given mask composites
    ``x_hat``. ``interpolant="random"`` uses the usual uniform interpolates
    between ``real`` and ``fake`` instead, ignoring ``x_hat``.
    """
    if interpolant == "random":
        if rng is None:
            raise ValueError("random interpolants need an rng")
        x_hat = random_interpolates(real, fake, rng)
    elif interpolant != "composite":
        raise ValueError(f"unknown interpolant {interpolant!r}")
    w = float(np.mean(D.score(fake)) - np.mean(D.score(real)))
    g = np.asarray(D.input_grad(x_hat))
    norms = np.linalg.norm(g.reshape(len(g), -1), axis=1)
    penalty = lambda_gp * float(np.mean((norms - 1.0) ** 2))
    return w + penalty, CriticDiagnostics(w, penalty, norms, np.asarray(x_hat))


def adv_generator_loss(D, fake) -> float:
    return -float(np.mean(D.score(fake)))
