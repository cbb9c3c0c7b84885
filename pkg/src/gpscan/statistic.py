"""Mean-shift log-likelihood ratio for a subset under a Gaussian posterior.

For residual ``r = y - mu`` and precision ``E``::

    LLR(w | beta) = beta * w'Er - beta^2 / 2 * w'Ew
    beta*         = w'Er / w'Ew
    LLR(w)        = (w'Er)^2 / (2 w'Ew)

Everything here is evaluated through the quadratic form; no densities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSubsetError, InputError
from .gp import PosteriorGaussian

DEGENERACY_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class ScoredSubset:
    """A subset ``w`` of a neighborhood with its MLE shift and LLR score.

    An all-false ``w`` is the null result: ``llr == 0`` and ``beta == 0``.
    """

    w: np.ndarray
    beta: float
    llr: float

    @property
    def is_null(self) -> bool:
        return not bool(np.any(self.w))

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.w))

    @classmethod
    def null(cls, m: int) -> "ScoredSubset":
        return cls(np.zeros(m, dtype=bool), 0.0, 0.0)


def as_weights(w, m: int) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != (m,):
        raise InputError(f"subset vector has shape {w.shape}, expected ({m},)")
    if w.dtype != bool:
        if not np.all((w == 0) | (w == 1)):
            raise InputError("subset weights must be binary")
        w = w.astype(bool)
    return w


def weighted_residual(post: PosteriorGaussian, y) -> np.ndarray:
    """``E (y - mu)``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != post.m:
        raise InputError(f"y has {y.shape[0]} entries, posterior covers {post.m}")
    return post.precision @ (y - post.mu)


def degeneracy_tolerance(precision: np.ndarray) -> np.ndarray:
    """Per-neighborhood floor on ``w'Ew``; works on (m, m) or (B, m, m)."""
    m = precision.shape[-1]
    return DEGENERACY_RTOL * np.trace(precision, axis1=-2, axis2=-1) / m


def llr_from_moments(a, b, tol, sign: int = 0) -> np.ndarray:
    """Vectorised ``a^2 / (2b)`` with ``a = w'Er`` and ``b = w'Ew``.

    Degenerate ``b`` (at or below ``tol``) scores ``-inf``.  With ``sign``
    of +1 / -1, subsets whose MLE shift has the other sign also score
    ``-inf`` so that a directional search never selects them.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = b > tol
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ok, a * a / (2.0 * np.where(ok, b, 1.0)), -np.inf)
    if sign:
        out = np.where(sign * a > 0, out, -np.inf)
    return out


def _moments(w: np.ndarray, post: PosteriorGaussian, y):
    er = weighted_residual(post, y)
    wf = w.astype(float)
    return float(wf @ er), float(wf @ post.precision @ wf)


def beta_mle(w, post: PosteriorGaussian, y) -> float:
    """Closed-form mean-shift MLE ``w'E(y - mu) / w'Ew``."""
    w = as_weights(w, post.m)
    if not w.any():
        raise DegenerateSubsetError("mean shift is undefined for an empty subset")
    a, b = _moments(w, post, y)
    if b <= degeneracy_tolerance(post.precision):
        raise DegenerateSubsetError(f"w'Ew = {b:.3g} is below the degeneracy tolerance")
    return a / b


def llr(w, beta: float, post: PosteriorGaussian, y) -> float:
    """Log-likelihood ratio of a shift ``beta`` on subset ``w`` against the null."""
    w = as_weights(w, post.m)
    if not w.any():
        return 0.0
    a, b = _moments(w, post, y)
    return float(beta * a - 0.5 * beta * beta * b)


def llr_max(w, post: PosteriorGaussian, y) -> ScoredSubset:
    """Score ``w`` at its MLE shift."""
    w = as_weights(w, post.m)
    beta = beta_mle(w, post, y)
    a, b = _moments(w, post, y)
    return ScoredSubset(w.copy(), beta, a * a / (2.0 * b))


def rescore_batch(W, precision: np.ndarray, er: np.ndarray, sign: int = 0):
    """Canonical scoring of chosen subsets, batched over a leading axis.

    ``W`` (B, m) bool, ``precision`` (B, m, m), ``er`` (B, m).  Rows that are
    empty, degenerate or of the wrong sign come back as null results.
    Returns ``(W, beta, llr)``.
    """
    W = np.array(W, dtype=bool)
    wf = W.astype(float)
    a = np.sum(wf * er, axis=1)
    b = np.sum((precision @ wf[:, :, None])[:, :, 0] * wf, axis=1)
    val = llr_from_moments(a, b, degeneracy_tolerance(precision), sign)
    keep = np.isfinite(val) & (val > 0) & W.any(axis=1)
    W[~keep] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(keep, a / np.where(keep, b, 1.0), 0.0)
    return W, beta, np.where(keep, val, 0.0)


def score_subset(w, precision: np.ndarray, er: np.ndarray, sign: int = 0) -> ScoredSubset:
    """Rescore one subset; degenerate or wrong-sign subsets come back null."""
    W, beta, val = rescore_batch(np.asarray(w, dtype=bool)[None], precision[None], er[None], sign)
    return ScoredSubset(W[0], float(beta[0]), float(val[0]))
