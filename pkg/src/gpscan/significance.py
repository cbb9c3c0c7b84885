"""Randomization testing of scan results against replicates drawn from the null GP."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigMismatchError, GPScanError, InputError, NumericalError
from .scanner import ScanConfig, Scanner, ScanResult

log = logging.getLogger(__name__)

DEFAULT_REPLICATES = 100
MAX_RETRIES = 3


def order_statistic_index(alpha: float, replicates: int) -> int:
    """1-based rank ``ceil((1 - alpha) R)`` of the threshold among sorted null maxima."""
    # guard against 0.95 * 20 = 19.000000000000004
    r = math.ceil((1.0 - alpha) * replicates - 1e-9)
    return min(max(r, 1), replicates)


@dataclass(frozen=True, eq=False)
class NullDistribution:
    """Maximum LLR of each null replicate and the resulting alpha-level threshold."""

    alpha: float
    replicates: int
    null_max_llrs: np.ndarray
    threshold: float
    config: ScanConfig
    seed: int = 0

    @classmethod
    def from_maxima(cls, maxima, alpha: float, config: ScanConfig, seed: int = 0):
        maxima = np.asarray(maxima, dtype=float)
        if not 0 < alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        R = maxima.shape[0]
        thr = float(np.sort(maxima)[order_statistic_index(alpha, R) - 1])
        return cls(alpha, R, maxima, thr, config, seed)

    def p_value(self, llr) -> np.ndarray:
        llr = np.asarray(llr, dtype=float)
        exceed = np.sum(self.null_max_llrs[None, :] >= llr.reshape(-1)[:, None], axis=1)
        return ((1.0 + exceed) / (self.replicates + 1.0)).reshape(llr.shape)


@dataclass(frozen=True, eq=False)
class SignificanceReport:
    alpha: float
    replicates: int
    null_max_llrs: np.ndarray
    threshold: float
    results: list
    p_values: np.ndarray
    significant: np.ndarray

    @property
    def significant_results(self) -> list[ScanResult]:
        return [r for r, s in zip(self.results, self.significant) if s]


def _replicate_rng(seed: int, r: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng([seed, r, attempt])


def null_maxima(scanner: Scanner, replicates: int, seed: int = 0,
                statistic=None) -> np.ndarray:
    """Max scan statistic for each of ``replicates`` null draws.

    Replicate ``r`` uses its own generator seeded by ``(seed, r, attempt)``,
    so results do not depend on evaluation order.  A failing replicate is
    redrawn up to three times before the error propagates.
    """
    stat = scanner.max_llr if statistic is None else statistic
    out = np.empty(replicates)
    for r in range(replicates):
        for attempt in range(MAX_RETRIES + 1):
            try:
                out[r] = stat(scanner.sample_null(_replicate_rng(seed, r, attempt)))
                break
            except (NumericalError, np.linalg.LinAlgError) as exc:
                if attempt == MAX_RETRIES:
                    raise GPScanError(f"replicate {r} failed after {MAX_RETRIES} retries") from exc
                log.warning("replicate %d attempt %d failed: %s", r, attempt, exc)
    return out


def randomization_threshold(data, hp, config: ScanConfig = ScanConfig(),
                            replicates: int = DEFAULT_REPLICATES, alpha: float = 0.05,
                            seed: int = 0, scanner: Scanner | None = None) -> NullDistribution:
    """Alpha-level LLR threshold from replicates drawn at the observed covariates.

    ``data``/``hp`` may be single objects or per-stream lists.
    """
    if replicates < 20:
        raise InputError("need at least 20 replicates for a usable quantile")
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    if scanner is None:
        if isinstance(data, (list, tuple)):
            scanner = Scanner([d.x for d in data], list(hp), config)
        else:
            scanner = Scanner(data.x, hp, config)
    elif scanner.config != config:
        raise ConfigMismatchError("scanner configuration differs from the requested one")
    maxima = null_maxima(scanner, replicates, seed)
    return NullDistribution.from_maxima(maxima, alpha, config, seed)


def significance_report(observed, null: NullDistribution,
                        config: ScanConfig | None = None) -> SignificanceReport:
    """Attach permutation p-values and significance flags to ranked results."""
    if config is not None and config != null.config:
        raise ConfigMismatchError(
            f"observed scan used {config.to_dict()} but the null used {null.config.to_dict()}")
    observed = list(observed)
    llrs = np.array([r.llr for r in observed], dtype=float)
    return SignificanceReport(null.alpha, null.replicates, null.null_max_llrs, null.threshold,
                              observed, null.p_value(llrs), llrs > null.threshold)
