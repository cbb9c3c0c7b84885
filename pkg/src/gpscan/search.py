"""Maximising LLR(w) over subsets of a neighborhood.

The ``*_batch`` routines work on stacks of neighborhoods of equal size:
``E`` is (B, k, k) precision blocks and ``er`` is (B, k) weighted residuals
``E (y - mu)``.  They return ``(W, beta, llr)`` with ``W`` a (B, k) boolean
mask; an empty row is the null result (``llr == 0``).  The single-posterior
functions are thin wrappers that take a :class:`PosteriorGaussian`.

``sign`` is +1 (positive shifts only), -1 (negative only) or 0 (either).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError, SearchRefusedError
from .gp import PosteriorGaussian
from .statistic import (ScoredSubset, as_weights, degeneracy_tolerance,
                        llr_from_moments, rescore_batch, score_subset,
                        weighted_residual)

EXHAUSTIVE_CAP = 25

_VARIANT_ALIASES = {
    "beta-max": "beta-max", "betamax": "beta-max", "beta_max": "beta-max",
    "grq": "grq",
    "stepwise": "stepwise",
    "exhaustive": "exhaustive",
}
DIRECTION_SIGNS = {"positive": (1,), "negative": (-1,), "both": (1, -1)}


@dataclass(frozen=True)
class SearchMethod:
    """Which subset optimiser to run, and in which shift direction."""

    variant: str = "beta-max"
    max_iters: int = 10
    direction: str = "both"
    exhaustive_cap: int = EXHAUSTIVE_CAP

    def __post_init__(self):
        key = self.variant.lower().replace(" ", "")
        if key not in _VARIANT_ALIASES:
            raise InputError(f"unknown search variant {self.variant!r}")
        object.__setattr__(self, "variant", _VARIANT_ALIASES[key])
        if self.direction not in DIRECTION_SIGNS:
            raise InputError(f"direction must be one of {sorted(DIRECTION_SIGNS)}")
        if self.max_iters < 1:
            raise InputError("max_iters must be a positive integer")

    @property
    def signs(self) -> tuple[int, ...]:
        return DIRECTION_SIGNS[self.direction]


# -- shared pieces -----------------------------------------------------------

def prefix_scan_batch(E, er, order, sign=0, valid=None):
    """Best of the k prefix subsets of each ordering.

    ``valid`` (B, k), in ordering positions, marks entries allowed into a
    prefix; a prefix is rejected once it reaches an invalid entry.
    Ties go to the shorter prefix.
    """
    B, k = er.shape
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(k)[None, :], axis=1)
    # adding point i to the prefix of everything ranked before it grows
    # w'Ew by E_ii + 2 * sum_{rank j < rank i} E_ij
    before = rank[:, None, :] < rank[:, :, None]
    inc = np.diagonal(E, axis1=1, axis2=2) + 2.0 * np.sum(E * before, axis=2)
    a = np.cumsum(np.take_along_axis(er, order, axis=1), axis=1)
    b = np.cumsum(np.take_along_axis(inc, order, axis=1), axis=1)
    scores = llr_from_moments(a, b, degeneracy_tolerance(E)[:, None], sign)
    if valid is not None:
        scores = np.where(np.logical_and.accumulate(valid, axis=1), scores, -np.inf)
    j = np.argmax(scores, axis=1)
    best = scores[np.arange(B), j]
    W = rank <= j[:, None]
    W[~(best > 0)] = False
    return rescore_batch(W, E, er, sign)


def _pick_best(runs):
    """Elementwise best over several (W, beta, llr) runs; earlier runs win ties."""
    W, beta, val = (np.array(x) for x in runs[0])
    for Wn, bn, ln in runs[1:]:
        take = ln > val
        W[take], beta[take], val[take] = Wn[take], bn[take], ln[take]
    return W, beta, val


def _priority_parts(E, er, W):
    d = np.diagonal(E, axis1=1, axis2=2)
    wf = W.astype(float)
    denom = 2.0 * np.einsum("bij,bj->bi", E, wf) - 2.0 * wf * d + d
    zero = denom == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        prio = 2.0 * er / np.where(zero, 1.0, denom)
    return prio, zero


def beta_max_priorities_batch(E, er, W):
    """Per-point maximum shift for inclusion, conditioned on current subsets ``W``."""
    prio, zero = _priority_parts(E, er, W)
    return np.where(zero, -np.inf, prio)


# -- optimisers --------------------------------------------------------------

def beta_max_batch(E, er, sign=1, max_iters=10):
    """Iterated conditional-priority prefix scan, starting from the empty subset."""
    if sign == 0:
        raise InputError("beta-max needs a shift direction (+1 or -1)")
    B, k = er.shape
    w = np.zeros((B, k), dtype=bool)
    best_W = np.zeros((B, k), dtype=bool)
    best_beta = np.zeros(B)
    best_llr = np.zeros(B)
    active = np.ones(B, dtype=bool)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ea, era, wa = E[idx], er[idx], w[idx]
        prio, zero = _priority_parts(Ea, era, wa)
        score = np.where(zero, -np.inf, sign * prio)
        order = np.argsort(-score, axis=1, kind="stable")
        valid = np.isfinite(np.take_along_axis(score, order, axis=1))
        Wn, bn, ln = prefix_scan_batch(Ea, era, order, sign, valid)
        better = ln > best_llr[idx]
        upd = idx[better]
        best_W[upd], best_beta[upd], best_llr[upd] = Wn[better], bn[better], ln[better]
        repeated = np.all(Wn == wa, axis=1)
        w[idx] = Wn
        active[idx[repeated]] = False
    return best_W, best_beta, best_llr


def grq_direction_batch(E, er):
    """Relaxed maximiser of the generalized Rayleigh quotient (w'Aw)/(w'Bw).

    ``A = E r r' E``, ``B = 2E``.  With ``B = L L'`` the top eigenvector ``v``
    of ``L^-1 A L^-T`` maps back as ``w = L^-T v``.  The sign is chosen so that
    ``w`` correlates nonnegatively with the residual ``r``.
    """
    try:
        L = np.linalg.cholesky(2.0 * E)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("precision block is not positive definite") from exc
    Linv = np.linalg.inv(L)
    A = er[:, :, None] * er[:, None, :]
    Ap = Linv @ A @ np.swapaxes(Linv, 1, 2)
    Ap = 0.5 * (Ap + np.swapaxes(Ap, 1, 2))
    _, vecs = np.linalg.eigh(Ap)
    wmax = np.einsum("bji,bj->bi", Linv, vecs[:, :, -1])
    resid = np.linalg.solve(E, er[:, :, None])[:, :, 0]
    s = np.sign(np.einsum("bi,bi->b", wmax, resid))
    s[s == 0] = 1.0
    return wmax * s[:, None]


def grq_batch(E, er, signs=(1,), wmax=None):
    if wmax is None:
        wmax = grq_direction_batch(E, er)
    runs = []
    for s in signs:
        order = np.argsort(-s * wmax, axis=1, kind="stable")
        runs.append(prefix_scan_batch(E, er, order, s))
    return _pick_best(runs)


def stepwise_batch(E, er, sign=0):
    """Greedy forward selection: add the single point with the largest LLR gain."""
    B, k = er.shape
    d = np.diagonal(E, axis1=1, axis2=2)
    tol = degeneracy_tolerance(E)[:, None]
    W = np.zeros((B, k), dtype=bool)
    a = np.zeros(B)
    b = np.zeros(B)
    cur = np.zeros(B)
    Ew = np.zeros((B, k))
    rows = np.arange(B)
    active = np.ones(B, dtype=bool)
    for _ in range(k):
        ca = a[:, None] + er
        cb = b[:, None] + 2.0 * Ew + d
        sc = llr_from_moments(ca, cb, tol, sign)
        sc[W] = -np.inf
        i = np.argmax(sc, axis=1)
        gain = sc[rows, i]
        step = active & (gain > cur)
        if not step.any():
            break
        r, ii = rows[step], i[step]
        W[r, ii] = True
        a[r], b[r], cur[r] = ca[r, ii], cb[r, ii], gain[step]
        Ew[r] += E[r, :, ii]
        active = step
    return rescore_batch(W, E, er, sign)


def exhaustive_single(E, er, sign=0, cap=EXHAUSTIVE_CAP, chunk=1 << 16):
    """Enumerate all nonempty subsets of one neighborhood.

    Ties on LLR go to the smaller subset, then to the lexicographically
    smallest sorted member list.
    """
    k = er.shape[0]
    if k > cap:
        raise SearchRefusedError(f"exhaustive search refused: neighborhood size {k} exceeds cap {cap}")
    if k == 0:
        return np.zeros(0, dtype=bool), 0.0, 0.0
    bits = np.arange(k, dtype=np.int64)
    tol = degeneracy_tolerance(E)
    total = 1 << k
    best = -np.inf
    best_codes = np.empty(0, dtype=np.int64)
    for start in range(1, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        Wc = ((codes[:, None] >> bits) & 1).astype(float)
        a = Wc @ er
        q = np.einsum("ij,ij->i", Wc @ E, Wc)
        sc = llr_from_moments(a, q, tol, sign)
        top = sc.max()
        if top > best:
            best, best_codes = top, codes[sc == top]
        elif top == best:
            best_codes = np.concatenate([best_codes, codes[sc == top]])
    if not best > 0:
        return np.zeros(k, dtype=bool), 0.0, 0.0

    def key(code):
        members = [i for i in range(k) if (int(code) >> i) & 1]
        return (len(members), members)

    code = min(best_codes, key=key)
    w = ((int(code) >> bits) & 1).astype(bool)
    W, beta, val = rescore_batch(w[None], E[None], er[None], sign)
    return W[0], float(beta[0]), float(val[0])


def search_batch(E, er, method: SearchMethod):
    """Run ``method`` on a stack of neighborhoods."""
    E = np.asarray(E, dtype=float)
    er = np.asarray(er, dtype=float)
    if method.variant == "exhaustive":
        sign = 0 if method.direction == "both" else method.signs[0]
        out = [exhaustive_single(E[b], er[b], sign, method.exhaustive_cap)
               for b in range(er.shape[0])]
        if not out:
            return np.zeros(er.shape, dtype=bool), np.zeros(0), np.zeros(0)
        return (np.stack([o[0] for o in out]), np.array([o[1] for o in out]),
                np.array([o[2] for o in out]))
    if method.variant == "grq":
        return grq_batch(E, er, method.signs)
    if method.variant == "stepwise":
        return _pick_best([stepwise_batch(E, er, s) for s in method.signs])
    return _pick_best([beta_max_batch(E, er, s, method.max_iters) for s in method.signs])


# -- single-posterior API ----------------------------------------------------

def _stack(post: PosteriorGaussian, y):
    return post.precision[None], weighted_residual(post, y)[None]


def _scored(W, beta, val) -> ScoredSubset:
    return ScoredSubset(W[0], float(beta[0]), float(val[0]))


def beta_max_priorities(w, post: PosteriorGaussian, y) -> np.ndarray:
    """``2 (E r)_i / (sum_{j != i} 2 w_j E_ji + E_ii)`` for every point.

    Zero denominators give ``-inf`` so the point is never admitted.
    """
    E, er = _stack(post, y)
    w = as_weights(w, post.m)
    return beta_max_priorities_batch(E, er, w[None])[0]


def prefix_scan(ordering, post: PosteriorGaussian, y, sign: int = 0) -> ScoredSubset:
    ordering = np.asarray(ordering, dtype=int)
    if sorted(ordering.tolist()) != list(range(post.m)):
        raise InputError("ordering must be a permutation of the neighborhood indices")
    E, er = _stack(post, y)
    return _scored(*prefix_scan_batch(E, er, ordering[None], sign))


def iterative_beta_max(post: PosteriorGaussian, y, method: SearchMethod = SearchMethod()) -> ScoredSubset:
    E, er = _stack(post, y)
    return _scored(*_pick_best([beta_max_batch(E, er, s, method.max_iters) for s in method.signs]))


def grq_direction(post: PosteriorGaussian, y) -> np.ndarray:
    E, er = _stack(post, y)
    return grq_direction_batch(E, er)[0]


def grq_search(post: PosteriorGaussian, y, method: SearchMethod = SearchMethod("grq")) -> ScoredSubset:
    E, er = _stack(post, y)
    return _scored(*grq_batch(E, er, method.signs))


def stepwise_search(post: PosteriorGaussian, y, direction: str = "both") -> ScoredSubset:
    E, er = _stack(post, y)
    return _scored(*_pick_best([stepwise_batch(E, er, s) for s in DIRECTION_SIGNS[direction]]))


def exhaustive_search(post: PosteriorGaussian, y, direction: str = "both",
                      cap: int = EXHAUSTIVE_CAP) -> ScoredSubset:
    sign = 0 if direction == "both" else DIRECTION_SIGNS[direction][0]
    w, beta, val = exhaustive_single(post.precision, weighted_residual(post, y), sign, cap)
    return ScoredSubset(w, beta, val)


def search(post: PosteriorGaussian, y, method: SearchMethod = SearchMethod()) -> ScoredSubset:
    E, er = _stack(post, y)
    return _scored(*search_batch(E, er, method))


# -- block-constrained variant -----------------------------------------------

def _check_blocks(blocks, m):
    out = []
    seen = set()
    for blk in blocks:
        blk = np.asarray(blk, dtype=int).reshape(-1)
        if blk.size == 0:
            raise InputError("blocks must be nonempty")
        if np.any(blk < 0) or np.any(blk >= m):
            raise InputError("block index out of range")
        s = set(blk.tolist())
        if len(s) != blk.size or s & seen:
            raise InputError("blocks must be pairwise disjoint without repeats")
        seen |= s
        out.append(blk)
    return out


def _block_priorities(blocks, w, E, er):
    out = np.empty(len(blocks))
    for n, blk in enumerate(blocks):
        outside = w.astype(float)
        outside[blk] = 0.0
        num = 2.0 * er[blk].sum()
        den = 2.0 * (E[blk] @ outside).sum() + E[np.ix_(blk, blk)].sum()
        out[n] = -np.inf if den == 0 else num / den
    return out


def block_beta_max_priorities(blocks, w, post: PosteriorGaussian, y) -> np.ndarray:
    """Maximum shift for including each whole block, given the current subset.

    The block's numerator is ``sum_{i in B} 2 (E r)_i`` and its denominator
    ``sum_{i in B} (sum_{j not in B} 2 w_j E_ji + E_ii + sum_{k in B, k != i} E_ki)``,
    which is where the block's contribution to LLR(w | beta) changes sign.
    """
    blocks = _check_blocks(blocks, post.m)
    w = as_weights(w, post.m)
    return _block_priorities(blocks, w, post.precision, weighted_residual(post, y))


def block_beta_max(blocks, post: PosteriorGaussian, y, max_iters: int = 10,
                   direction: str = "both") -> ScoredSubset:
    """Iterated priority scan where whole blocks enter or leave together."""
    blocks = _check_blocks(blocks, post.m)
    E = post.precision
    er = weighted_residual(post, y)
    best = ScoredSubset.null(post.m)
    for sign in DIRECTION_SIGNS[direction]:
        w = np.zeros(post.m, dtype=bool)
        for _ in range(max_iters):
            prio = _block_priorities(blocks, w, E, er)
            score = np.where(np.isneginf(prio), -np.inf, sign * prio)
            order = np.argsort(-score, kind="stable")
            cand = ScoredSubset.null(post.m)
            cur = np.zeros(post.m, dtype=bool)
            for bi in order:
                if not np.isfinite(score[bi]):
                    break
                cur = cur.copy()
                cur[blocks[bi]] = True
                s = score_subset(cur, E, er, sign)
                if s.llr > cand.llr:
                    cand = s
            if cand.llr > best.llr:
                best = cand
            if np.array_equal(cand.w, w):
                break
            w = cand.w
    return best
