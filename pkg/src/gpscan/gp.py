"""Gaussian-process machinery: RBF kernel, linear mean, marginal likelihood,
hyperparameter fitting, prior sampling and hold-out posterior inference.

All inference is exact and Cholesky based.  Covariances returned by
:func:`posterior` are observation-space by default (latent posterior
covariance plus the noise variance), which is what the scan statistic needs
since it scores observed responses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

from .errors import FitError, InputError, NumericalError

log = logging.getLogger(__name__)

MIN_NOISE = 1e-8
JITTER_START = 1e-8
JITTER_MAX = 1e-4


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InputError(f"covariates must be a 2-D array, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates ``x`` (n, D), responses ``y`` (n,), optional stream labels."""

    x: np.ndarray
    y: np.ndarray
    stream_id: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = _as_matrix(self.x)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise InputError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if x.shape[0] < 1:
            raise InputError("dataset must contain at least one point")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise InputError("dataset contains non-finite values")
        sid = self.stream_id
        if sid is not None:
            sid = np.asarray(sid, dtype=int).reshape(-1)
            if sid.shape[0] != y.shape[0]:
                raise InputError("stream_id length does not match y")
        names = self.names
        if names is None:
            names = tuple(f"x{d}" for d in range(x.shape[1]))
        elif len(names) != x.shape[1]:
            raise InputError("names must give one label per covariate column")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "stream_id", sid)
        object.__setattr__(self, "names", tuple(names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def with_y(self, y) -> "Dataset":
        return replace(self, y=np.asarray(y, dtype=float))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        sid = None if self.stream_id is None else self.stream_id[idx]
        return Dataset(self.x[idx], self.y[idx], sid, self.names)

    def streams(self) -> dict[int, "Dataset"]:
        """Split into one dataset per stream label (single entry if unlabeled)."""
        if self.stream_id is None:
            return {0: self}
        return {int(s): self.subset(np.flatnonzero(self.stream_id == s))
                for s in np.unique(self.stream_id)}


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """RBF kernel + linear mean hyperparameters."""

    lengthscale: np.ndarray
    signal_variance: float
    noise_variance: float
    mean_weights: np.ndarray
    mean_bias: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        mw = np.atleast_1d(np.asarray(self.mean_weights, dtype=float))
        if ls.ndim != 1 or mw.shape != ls.shape:
            raise InputError("lengthscale and mean_weights must be vectors of equal length")
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise InputError("lengthscales must be positive and finite")
        if not self.signal_variance > 0:
            raise InputError("signal_variance must be positive")
        if not self.noise_variance >= MIN_NOISE:
            raise InputError(f"noise_variance must be >= {MIN_NOISE}")
        ls.setflags(write=False)
        mw.setflags(write=False)
        object.__setattr__(self, "lengthscale", ls)
        object.__setattr__(self, "mean_weights", mw)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        object.__setattr__(self, "mean_bias", float(self.mean_bias))

    @property
    def dim(self) -> int:
        return self.lengthscale.shape[0]

    @classmethod
    def isotropic(cls, dim, lengthscale=1.0, signal_variance=1.0,
                  noise_variance=0.1, mean_bias=0.0) -> "Hyperparams":
        return cls(np.full(dim, float(lengthscale)), signal_variance,
                   noise_variance, np.zeros(dim), mean_bias)

    def to_dict(self) -> dict:
        return {
            "lengthscale": [float(v) for v in self.lengthscale],
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
            "mean_weights": [float(v) for v in self.mean_weights],
            "mean_bias": self.mean_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(np.asarray(d["lengthscale"], dtype=float),
                   float(d["signal_variance"]), float(d["noise_variance"]),
                   np.asarray(d["mean_weights"], dtype=float),
                   float(d.get("mean_bias", 0.0)))

    # optimizer packing: [log ls (D), log sf2, log sn2, mean weights (D), bias]
    def _pack(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscale),
                               [math.log(self.signal_variance), math.log(self.noise_variance)],
                               self.mean_weights, [self.mean_bias]])

    @classmethod
    def _unpack(cls, theta: np.ndarray, dim: int) -> "Hyperparams":
        return cls(np.exp(theta[:dim]), math.exp(theta[dim]),
                   max(math.exp(theta[dim + 1]), MIN_NOISE),
                   theta[dim + 2:2 * dim + 2], theta[2 * dim + 2])


@dataclass(frozen=True, eq=False)
class PosteriorGaussian:
    """Gaussian over m points with cached Cholesky factor and precision."""

    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    precision: np.ndarray
    jitter: float = 0.0

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def from_covariance(cls, mu, sigma) -> "PosteriorGaussian":
        mu = np.asarray(mu, dtype=float).reshape(-1)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mu.shape[0], mu.shape[0]):
            raise InputError("covariance shape does not match mean")
        sigma = 0.5 * (sigma + sigma.T)
        chol, jitter = robust_cholesky(sigma)
        if jitter:
            sigma = sigma + jitter * np.eye(mu.shape[0])
        precision = linalg.cho_solve((chol, True), np.eye(mu.shape[0]))
        precision = 0.5 * (precision + precision.T)
        return cls(mu, sigma, chol, precision, jitter)

    @classmethod
    def from_precision(cls, mu, precision) -> "PosteriorGaussian":
        mu = np.asarray(mu, dtype=float).reshape(-1)
        precision = 0.5 * (np.asarray(precision, dtype=float) + np.asarray(precision, dtype=float).T)
        pl, _ = robust_cholesky(precision)
        sigma = linalg.cho_solve((pl, True), np.eye(mu.shape[0]))
        sigma = 0.5 * (sigma + sigma.T)
        chol, jitter = robust_cholesky(sigma)
        return cls(mu, sigma, chol, precision, jitter)


def robust_cholesky(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a``, escalating diagonal jitter on failure.

    Jitter starts at 1e-8 times the mean diagonal and grows tenfold up to
    1e-4 times it.  Returns ``(L, jitter_added)``.
    """
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericalError("matrix has non-positive mean diagonal; cannot factorize")
    eye = np.eye(a.shape[0])
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-9):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise NumericalError(f"Cholesky failed after jitter up to {JITTER_MAX:g} x mean diagonal")


def _check_dim(x: np.ndarray, hp: Hyperparams):
    if x.shape[1] != hp.dim:
        raise InputError(f"covariates have {x.shape[1]} columns, hyperparameters expect {hp.dim}")


def kernel_matrix(xa, xb, hp: Hyperparams) -> np.ndarray:
    """RBF covariance ``sf2 * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)``."""
    xa, xb = _as_matrix(xa), _as_matrix(xb)
    _check_dim(xa, hp)
    _check_dim(xb, hp)
    za, zb = xa / hp.lengthscale, xb / hp.lengthscale
    sq = (np.sum(za ** 2, axis=1)[:, None] + np.sum(zb ** 2, axis=1)[None, :]
          - 2.0 * za @ zb.T)
    np.maximum(sq, 0.0, out=sq)
    k = hp.signal_variance * np.exp(-0.5 * sq)
    if xa is xb or (xa.shape == xb.shape and np.array_equal(xa, xb)):
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, hp.signal_variance)
    return k


def mean_function(x, hp: Hyperparams) -> np.ndarray:
    x = _as_matrix(x)
    _check_dim(x, hp)
    return x @ hp.mean_weights + hp.mean_bias


def _prior_cov(x: np.ndarray, hp: Hyperparams) -> np.ndarray:
    c = kernel_matrix(x, x, hp)
    c[np.diag_indices_from(c)] += hp.noise_variance
    return c


def log_marginal_likelihood(data: Dataset, hp: Hyperparams) -> float:
    """log N(y | m(x), K(x, x) + noise I)."""
    _check_dim(data.x, hp)
    chol, _ = robust_cholesky(_prior_cov(data.x, hp))
    r = data.y - mean_function(data.x, hp)
    alpha = linalg.cho_solve((chol, True), r)
    return float(-0.5 * r @ alpha - np.sum(np.log(np.diag(chol)))
                 - 0.5 * data.n * math.log(2 * math.pi))


def _neg_lml_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, dim: int):
    hp = Hyperparams._unpack(theta, dim)
    k = kernel_matrix(x, x, hp)
    c = k.copy()
    c[np.diag_indices_from(c)] += hp.noise_variance
    chol, _ = robust_cholesky(c)
    r = y - (x @ hp.mean_weights + hp.mean_bias)
    alpha = linalg.cho_solve((chol, True), r)
    n = y.shape[0]
    lml = -0.5 * r @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2 * math.pi)

    cinv = linalg.cho_solve((chol, True), np.eye(n))
    inner = np.outer(alpha, alpha) - cinv
    grad = np.empty_like(theta)
    for d in range(dim):
        dist = (x[:, d][:, None] - x[:, d][None, :]) ** 2 / hp.lengthscale[d] ** 2
        grad[d] = 0.5 * np.sum(inner * (k * dist))
    grad[dim] = 0.5 * np.sum(inner * k)
    grad[dim + 1] = 0.5 * hp.noise_variance * np.trace(inner)
    grad[dim + 2:2 * dim + 2] = x.T @ alpha
    grad[2 * dim + 2] = np.sum(alpha)
    return -lml, -grad


def lml_gradient(data: Dataset, hp: Hyperparams) -> np.ndarray:
    """Gradient of the log marginal likelihood in the optimizer's packing
    (log lengthscales, log signal variance, log noise variance, mean weights, bias)."""
    _, g = _neg_lml_and_grad(hp._pack(), data.x, data.y, hp.dim)
    return -g


def default_init(data: Dataset) -> Hyperparams:
    """Data-driven starting point: OLS mean, per-dimension spread as lengthscale."""
    x, y = data.x, data.y
    design = np.column_stack([x, np.ones(data.n)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid_var = float(np.var(y - design @ coef))
    if resid_var <= 0:
        resid_var = 1.0
    spread = np.std(x, axis=0)
    spread[spread <= 0] = 1.0
    return Hyperparams(spread, resid_var, max(0.1 * resid_var, MIN_NOISE), coef[:-1], coef[-1])


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 3
    max_iter: int = 200
    seed: int = 0
    restart_scale: float = 1.0


def fit_hyperparameters(data: Dataset, init: Hyperparams | None = None,
                        config: FitConfig = FitConfig()) -> Hyperparams:
    """Maximise the log marginal likelihood in log-parameter space.

    Runs L-BFGS-B from ``init`` and from ``config.restarts`` randomly
    perturbed copies of it.  Never returns something worse than ``init``.
    """
    if init is None:
        init = default_init(data)
    _check_dim(data.x, init)
    dim = init.dim
    theta0 = init._pack()
    bounds = ([(None, None)] * (dim + 1) + [(math.log(MIN_NOISE), None)]
              + [(None, None)] * (dim + 1))
    rng = np.random.default_rng(config.seed)

    starts = [theta0]
    for _ in range(config.restarts):
        t = theta0.copy()
        t[:dim + 2] += config.restart_scale * rng.standard_normal(dim + 2)
        t[dim + 1] = max(t[dim + 1], math.log(MIN_NOISE))
        starts.append(t)

    def objective(theta):
        try:
            return _neg_lml_and_grad(theta, data.x, data.y, dim)
        except (NumericalError, InputError, FloatingPointError):
            return 1e25, np.zeros_like(theta)

    try:
        best_val = -log_marginal_likelihood(data, init)
    except NumericalError:
        best_val = np.inf
    best = init
    failures = 0
    for theta in starts:
        try:
            res = optimize.minimize(objective, theta, jac=True, method="L-BFGS-B",
                                    bounds=bounds, options={"maxiter": config.max_iter})
            cand = Hyperparams._unpack(res.x, dim)
            val = -log_marginal_likelihood(data, cand)
        except (NumericalError, InputError, ValueError, FloatingPointError) as exc:
            log.debug("restart failed: %s", exc)
            failures += 1
            continue
        if not np.isfinite(val) or val >= 1e24:
            failures += 1
            continue
        if val < best_val:
            best, best_val = cand, val
    if failures == len(starts) and not np.isfinite(best_val):
        raise FitError("all optimizer starts failed", best=best)
    return best


def posterior(train: Dataset | None, x_star, hp: Hyperparams,
              include_noise: bool = True) -> PosteriorGaussian:
    """Predictive Gaussian at ``x_star`` given training data.

    ``include_noise`` adds the noise variance to the covariance diagonal
    (distribution of new observations rather than the latent function).
    An empty or ``None`` train set gives the prior at ``x_star``.
    """
    x_star = _as_matrix(x_star)
    _check_dim(x_star, hp)
    if x_star.shape[0] == 0:
        raise InputError("x_star must contain at least one point")
    k_ss = kernel_matrix(x_star, x_star, hp)
    mu = mean_function(x_star, hp)
    if train is not None and train.n > 0:
        _check_dim(train.x, hp)
        chol, _ = robust_cholesky(_prior_cov(train.x, hp))
        k_sx = kernel_matrix(x_star, train.x, hp)
        mu = mu + k_sx @ linalg.cho_solve((chol, True), train.y - mean_function(train.x, hp))
        v = linalg.solve_triangular(chol, k_sx.T, lower=True)
        k_ss = k_ss - v.T @ v
    if include_noise:
        k_ss[np.diag_indices_from(k_ss)] += hp.noise_variance
    return PosteriorGaussian.from_covariance(mu, k_ss)


def sample_prior(x, hp: Hyperparams, seed=0, size: int | None = None) -> np.ndarray:
    """Draw(s) from N(m(x), K(x, x) + noise I).

    ``seed`` may be an int, a sequence of ints or a ``numpy.random.Generator``.
    With ``size`` given, returns an array of shape (size, n).
    """
    x = _as_matrix(x)
    if x.shape[0] == 0:
        raise InputError("x must contain at least one point")
    chol, _ = robust_cholesky(_prior_cov(x, hp))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = mean_function(x, hp)
    if size is None:
        return m + chol @ rng.standard_normal(x.shape[0])
    return m[None, :] + rng.standard_normal((size, x.shape[0])) @ chol.T
