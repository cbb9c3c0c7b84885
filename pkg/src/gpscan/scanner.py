"""Neighborhood construction and scan orchestration (GPNS, GPSS, multi-stream).

Hold-out posteriors for every neighborhood come from one factorization of
the full observation covariance ``C = K + noise I``.  With ``P = C^-1``, the
distribution of the neighborhood ``N`` conditioned on every point outside it
has precision ``P[N, N]``, and ``E (y_N - mu_N) = (P (y - m))[N]``.  So the
scan statistic needs only slices of ``P`` and of one matrix-vector product.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import InputError
from .gp import (Dataset, Hyperparams, PosteriorGaussian, _prior_cov,
                 mean_function, robust_cholesky)
from .search import SearchMethod, prefix_scan_batch, search_batch
from .statistic import ScoredSubset, llr_from_moments, degeneracy_tolerance

log = logging.getLogger(__name__)

DEFAULT_K = 15


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """A seed point and its nearest neighbors, ordered by distance (seed first)."""

    seed_index: int
    member_indices: np.ndarray

    @property
    def k(self) -> int:
        return int(self.member_indices.shape[0])


def standardize(x) -> np.ndarray:
    """Divide each covariate column by its sample standard deviation."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    sd = np.std(x, axis=0, ddof=1) if x.shape[0] > 1 else np.ones(x.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return x / sd


def knn_indices(x, k: int, chunk: int = 512) -> np.ndarray:
    """(n, k) exact nearest-neighbor indices under standardized Euclidean distance.

    Row ``i`` starts with ``i`` itself; distance ties go to the lower index.
    """
    z = standardize(x)
    n = z.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"neighborhood size k={k} must be between 1 and n={n}")
    sq = np.sum(z * z, axis=1)
    out = np.empty((n, k), dtype=np.intp)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        d = sq[rows, None] + sq[None, :] - 2.0 * z[rows] @ z.T
        np.maximum(d, 0.0, out=d)
        d[np.arange(rows.size), rows] = -1.0
        out[rows] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def build_neighborhoods(x, k: int) -> list[Neighborhood]:
    idx = knn_indices(x, k)
    return [Neighborhood(i, idx[i]) for i in range(idx.shape[0])]


class HoldoutModel:
    """Full-data factorization serving every neighborhood's hold-out posterior."""

    def __init__(self, x, hp: Hyperparams):
        self.x = np.asarray(x, dtype=float)
        self.hp = hp
        cov = _prior_cov(self.x, hp)
        self.chol, self.jitter = robust_cholesky(cov)
        p = linalg.cho_solve((self.chol, True), np.eye(cov.shape[0]))
        self.precision = 0.5 * (p + p.T)
        self.mean = mean_function(self.x, hp)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def weighted_residual(self, y) -> np.ndarray:
        return self.precision @ (np.asarray(y, dtype=float) - self.mean)

    def precision_blocks(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return self.precision[idx[..., :, None], idx[..., None, :]]

    def posterior(self, y, members) -> PosteriorGaussian:
        """Observation-space posterior of ``members`` given all other points."""
        members = np.asarray(members, dtype=int)
        E = self.precision[np.ix_(members, members)]
        pr = self.weighted_residual(y)[members]
        sigma = np.linalg.inv(E)
        sigma = 0.5 * (sigma + sigma.T)
        mu = np.asarray(y, dtype=float)[members] - sigma @ pr
        chol, _ = robust_cholesky(sigma)
        return PosteriorGaussian(mu, sigma, chol, E)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.chol @ rng.standard_normal(self.n)


class IndependentModel:
    """Null model ignoring correlation: prior mean, marginal prior variance."""

    def __init__(self, x, hp: Hyperparams):
        self.x = np.asarray(x, dtype=float)
        self.hp = hp
        self.mean = mean_function(self.x, hp)
        self.variance = hp.signal_variance + hp.noise_variance
        self._gp = None

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def weighted_residual(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.mean) / self.variance

    def precision_blocks(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        eye = np.eye(idx.shape[-1]) / self.variance
        return np.broadcast_to(eye, idx.shape + (idx.shape[-1],)).copy()

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        # replicates still come from the correlated GP null
        if self._gp is None:
            self._gp = HoldoutModel(self.x, self.hp)
        return self._gp.sample(rng)


@dataclass(frozen=True)
class ScanConfig:
    """Everything that defines a scan, and so must match for significance testing."""

    scan: str = "gpss"
    k: int = DEFAULT_K
    k_max: int = DEFAULT_K
    method: SearchMethod = field(default_factory=lambda: SearchMethod(direction="positive"))
    covariance: str = "gp"

    def __post_init__(self):
        if self.scan not in ("gpss", "gpns"):
            raise InputError(f"scan must be 'gpss' or 'gpns', got {self.scan!r}")
        if self.covariance not in ("gp", "independent"):
            raise InputError(f"covariance must be 'gp' or 'independent', got {self.covariance!r}")
        if self.k < 1 or self.k_max < 1:
            raise InputError("neighborhood sizes must be positive")

    @property
    def size(self) -> int:
        return self.k_max if self.scan == "gpns" else self.k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = asdict(self.method)
        return d


@dataclass(frozen=True, eq=False)
class ScanResult:
    """One scored neighborhood: the chosen subset and which points it covers.

    For multi-stream scans ``neighborhood.seed_index`` is the seed site,
    member indices are positions in the concatenation of all streams and
    ``streams`` gives each member's stream.
    """

    neighborhood: Neighborhood
    subset: ScoredSubset
    streams: np.ndarray | None = None

    @property
    def llr(self) -> float:
        return self.subset.llr

    @property
    def beta(self) -> float:
        return self.subset.beta

    @property
    def seed(self) -> int:
        return self.neighborhood.seed_index

    @property
    def included(self) -> np.ndarray:
        return self.neighborhood.member_indices[self.subset.w]

    @property
    def included_streams(self) -> np.ndarray | None:
        return None if self.streams is None else self.streams[self.subset.w]


def _site_table(xs):
    """Shared coordinate sites and per-site point lists for several streams."""
    if len(xs) == 1:
        n = xs[0].shape[0]
        return xs[0], [[(0, i)] for i in range(n)]
    lookup: dict[bytes, int] = {}
    coords = []
    points: list[list[tuple[int, int]]] = []
    for s, x in enumerate(xs):
        for i, row in enumerate(x):
            key = np.ascontiguousarray(row).tobytes()
            site = lookup.get(key)
            if site is None:
                site = lookup[key] = len(coords)
                coords.append(row)
                points.append([])
            points[site].append((s, i))
    return np.array(coords), points


class Scanner:
    """Scan one or several response streams over fixed covariates.

    The expensive parts (neighborhoods, factorizations, precision blocks)
    depend only on covariates and hyperparameters, so one scanner serves the
    observed data and every randomization replicate.
    """

    def __init__(self, xs, hps, config: ScanConfig = ScanConfig()):
        if isinstance(xs, np.ndarray) or isinstance(hps, Hyperparams):
            xs, hps = [xs], [hps]
        xs = [np.asarray(x, dtype=float).reshape(len(x), -1) for x in xs]
        if len(xs) != len(hps) or not xs:
            raise InputError("need one hyperparameter set per stream")
        dims = {x.shape[1] for x in xs}
        if len(dims) != 1:
            raise InputError("all streams must share the covariate dimensionality")
        self.config = config
        self.hps = list(hps)
        self.n_streams = len(xs)
        if config.scan == "gpns" and self.n_streams > 1:
            raise InputError("GPNS is single-stream only")
        sizes = [x.shape[0] for x in xs]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.stream_of = np.repeat(np.arange(self.n_streams), sizes)
        k = config.size
        if config.covariance == "gp" and self.n_streams == 1 and k > sizes[0] - 1:
            raise InputError(f"neighborhood size {k} leaves no conditioning points (n={sizes[0]})")

        self.sites, site_points = _site_table(xs)
        self.site_nbrs = knn_indices(self.sites, k)
        model_cls = HoldoutModel if config.covariance == "gp" else IndependentModel
        self.models = [model_cls(x, hp) for x, hp in zip(xs, self.hps)]

        members = []
        for row in self.site_nbrs:
            members.append(np.array([self.offsets[s] + i for site in row
                                     for s, i in site_points[site]], dtype=np.intp))
        self.members = members
        self.n_posteriors = len(members) * self.n_streams * (k if config.scan == "gpns" else 1)

        self._groups = []
        by_size: dict[int, list[int]] = {}
        for j, m in enumerate(members):
            by_size.setdefault(m.shape[0], []).append(j)
        for size, rows in sorted(by_size.items()):
            rows = np.array(rows, dtype=np.intp)
            ids = np.stack([members[j] for j in rows])
            self._groups.append((rows, ids, self._blocks(ids)))

    def _blocks(self, ids):
        if self.n_streams == 1:
            return self.models[0].precision_blocks(ids)
        B, m = ids.shape
        E = np.zeros((B, m, m))
        streams = self.stream_of[ids]
        for b in range(B):
            for s in range(self.n_streams):
                pos = np.flatnonzero(streams[b] == s)
                if pos.size:
                    local = ids[b, pos] - self.offsets[s]
                    E[b][np.ix_(pos, pos)] = self.models[s].precision_blocks(local)
        return E

    def _ys(self, y):
        if self.n_streams == 1 and not isinstance(y, (list, tuple)):
            y = [y]
        ys = [np.asarray(v, dtype=float).reshape(-1) for v in y]
        if len(ys) != self.n_streams or any(v.shape[0] != m.n for v, m in zip(ys, self.models)):
            raise InputError("responses do not match the scanner's streams")
        return ys

    def _weighted(self, y) -> np.ndarray:
        return np.concatenate([m.weighted_residual(v) for m, v in zip(self.models, self._ys(y))])

    def score(self, y):
        """Per-neighborhood best subsets as arrays.

        GPSS: ``(W list, beta (n,), llr (n,))``, one row per seed.
        GPNS: ``llr`` and ``beta`` have shape (n, k_max), one column per size.
        """
        pr = self._weighted(y)
        n = len(self.members)
        cfg = self.config
        if cfg.scan == "gpns":
            rows, ids, E = self._groups[0]
            er = pr[ids]
            a = np.cumsum(er, axis=1)
            inc = np.diagonal(E, axis1=1, axis2=2) + 2.0 * np.tril(E, -1).sum(axis=2)
            b = np.cumsum(inc, axis=1)
            sign = 0 if cfg.method.direction == "both" else cfg.method.signs[0]
            val = llr_from_moments(a, b, degeneracy_tolerance(E)[:, None], sign)
            ok = np.isfinite(val)
            llr = np.where(ok, val, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                beta = np.where(ok, a / np.where(ok, b, 1.0), 0.0)
            return ok, beta, llr
        W = [None] * n
        beta = np.zeros(n)
        llr = np.zeros(n)
        for rows, ids, E in self._groups:
            Wg, bg, lg = search_batch(E, pr[ids], cfg.method)
            beta[rows], llr[rows] = bg, lg
            for j, r in enumerate(rows):
                W[r] = Wg[j]
        return W, beta, llr

    def max_llr(self, y) -> float:
        return float(np.max(self.score(y)[2]))

    def scan(self, y) -> list[ScanResult]:
        """Ranked results: LLR descending, then seed index, then size."""
        W, beta, llr = self.score(y)
        results = []
        streams_of = (lambda ids: None) if self.n_streams == 1 else (lambda ids: self.stream_of[ids])
        if self.config.scan == "gpns":
            n, kmax = llr.shape
            seeds, sizes = np.divmod(np.arange(n * kmax), kmax)
            order = np.lexsort((sizes, seeds, -llr.ravel()))
            for o in order:
                i, kk = int(seeds[o]), int(sizes[o]) + 1
                w = np.ones(kk, dtype=bool) if W[i, kk - 1] else np.zeros(kk, dtype=bool)
                nb = Neighborhood(i, self.members[i][:kk])
                results.append(ScanResult(nb, ScoredSubset(w, float(beta[i, kk - 1]), float(llr[i, kk - 1]))))
            return results
        order = np.lexsort((np.arange(llr.shape[0]), -llr))
        for i in order:
            ids = self.members[i]
            nb = Neighborhood(int(i), ids)
            results.append(ScanResult(nb, ScoredSubset(W[i], float(beta[i]), float(llr[i])),
                                      streams_of(ids)))
        return results

    def sample_null(self, rng: np.random.Generator):
        ys = [m.sample(rng) for m in self.models]
        return ys[0] if self.n_streams == 1 else ys


def gpns(data: Dataset, hp: Hyperparams, k_max: int, direction: str = "positive") -> list[ScanResult]:
    """Score every k-neighborhood (k = 1..k_max) as a whole; ranked by LLR."""
    cfg = ScanConfig(scan="gpns", k_max=k_max, method=SearchMethod(direction=direction))
    return Scanner(data.x, hp, cfg).scan(data.y)


def gpss(data: Dataset, hp: Hyperparams, k: int = DEFAULT_K,
         method: SearchMethod = SearchMethod(direction="positive")) -> list[ScanResult]:
    """Best subset within each fixed-size neighborhood; ranked by LLR."""
    return Scanner(data.x, hp, ScanConfig(scan="gpss", k=k, method=method)).scan(data.y)


def multi_stream_posterior(posteriors) -> PosteriorGaussian:
    """Stack independent stream posteriors into one block-diagonal Gaussian."""
    posteriors = list(posteriors)
    if not posteriors:
        raise InputError("need at least one stream posterior")
    if len(posteriors) == 1:
        return posteriors[0]
    return PosteriorGaussian(
        np.concatenate([p.mu for p in posteriors]),
        linalg.block_diag(*[p.sigma for p in posteriors]),
        linalg.block_diag(*[p.chol for p in posteriors]),
        linalg.block_diag(*[p.precision for p in posteriors]),
        max(p.jitter for p in posteriors),
    )


def multi_stream_scan(datasets, hps, k: int = DEFAULT_K,
                      method: SearchMethod = SearchMethod(direction="positive")) -> list[ScanResult]:
    """Joint GPSS over several streams sharing one coordinate space."""
    datasets = list(datasets)
    scanner = Scanner([d.x for d in datasets], list(hps), ScanConfig(scan="gpss", k=k, method=method))
    return scanner.scan([d.y for d in datasets])


def deduplicate(results, max_overlap: float = 0.5) -> list[ScanResult]:
    """Drop results sharing more than ``max_overlap`` of their included points
    with a higher-ranked kept result."""
    kept: list[ScanResult] = []
    kept_sets: list[set] = []
    for r in results:
        inc = set(r.included.tolist())
        if inc and any(len(inc & s) > max_overlap * len(inc) for s in kept_sets):
            continue
        kept.append(r)
        kept_sets.append(inc)
    return kept
