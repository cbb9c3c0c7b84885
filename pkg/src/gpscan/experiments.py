"""Synthetic benchmark harness: GP grid data, injected multiplicative
anomalies, detection metrics and the sweep / ratio / runtime tables.

Every trial derives its generators from ``(seed, trial, stream)`` so tables
are reproducible and the same base data, injection and null replicates are
reused across factors (common random numbers).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SearchRefusedError
from .gp import Dataset, FitConfig, Hyperparams, fit_hyperparameters, sample_prior
from .scanner import HoldoutModel, ScanConfig, Scanner, knn_indices
from .search import EXHAUSTIVE_CAP, SearchMethod, search_batch
from .significance import order_statistic_index

log = logging.getLogger(__name__)

DEFAULT_FACTORS = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
DEFAULT_DENSITIES = (0.2, 0.4, 0.6, 0.8, 1.0)

# lengthscale in grid units; the bias keeps y mostly positive so that
# multiplicative scaling acts as an upward shift
DEFAULT_SYNTH_HP = Hyperparams(lengthscale=np.array([3.0, 3.0]), signal_variance=1.0,
                               noise_variance=0.1, mean_weights=np.zeros(2), mean_bias=2.0)

GPSS_METHODS = ("gpss-beta-max", "gpss-grq", "gpss-stepwise")
METHODS = GPSS_METHODS + ("gpns", "independent", "gp-outlier")
METRIC_COLUMNS = ("method", "k", "factor_or_density", "precision", "recall", "power",
                  "detected_size", "wallclock_ms")

_STREAM_DATA, _STREAM_INJECT, _STREAM_NULL = 0, 1, 2


@dataclass(frozen=True)
class InjectionSpec:
    factor: float = 2.0
    neighborhood_size: int = 15
    density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.factor >= 1:
            raise InputError("factor must be at least 1")
        if not 0 < self.density <= 1:
            raise InputError("density must lie in (0, 1]")
        if self.neighborhood_size < 1:
            raise InputError("neighborhood_size must be positive")

    @property
    def n_anomalous(self) -> int:
        return math.ceil(self.density * self.neighborhood_size - 1e-9)


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    power_at_alpha: float
    detected_size: int


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared settings for the synthetic protocol."""

    grid_side: int = 20
    hp: Hyperparams = DEFAULT_SYNTH_HP
    k: int = 15
    alpha: float = 0.05
    replicates: int = 100
    seed: int = 0
    refit: bool = False
    timing: bool = False

    def to_dict(self) -> dict:
        return {"grid_side": self.grid_side, "k": self.k, "alpha": self.alpha,
                "replicates": self.replicates, "seed": self.seed, "refit": self.refit,
                "hp": self.hp.to_dict()}


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(v) for v in key])


def grid_covariates(grid_side: int) -> np.ndarray:
    g = np.arange(grid_side, dtype=float)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def synth_generate(grid_side: int, hp: Hyperparams = DEFAULT_SYNTH_HP, seed=0) -> Dataset:
    """A draw from the GP prior (noise included) on a regular 2D grid."""
    if grid_side < 1:
        raise InputError("grid_side must be positive")
    if grid_side * grid_side > 5000:
        raise InputError("grid too large for exact inference")
    x = grid_covariates(grid_side)
    return Dataset(x, sample_prior(x, hp, seed), names=("gx", "gy"))


def inject_anomaly(data: Dataset, spec: InjectionSpec) -> tuple[Dataset, np.ndarray]:
    """Scale ``ceil(density k)`` random members of a random k-neighborhood."""
    rng = np.random.default_rng(spec.seed)
    center = int(rng.integers(data.n))
    nbrs = knn_indices(data.x, spec.neighborhood_size)[center]
    chosen = rng.choice(nbrs, size=spec.n_anomalous, replace=False)
    truth = np.zeros(data.n, dtype=bool)
    truth[chosen] = True
    y = np.array(data.y)
    y[truth] *= spec.factor
    return data.with_y(y), truth


def evaluate_detection(detected, truth, significant: bool) -> DetectionMetrics:
    detected = np.unique(np.asarray(detected, dtype=int))
    truth = np.asarray(truth, dtype=bool)
    if detected.size and (detected.min() < 0 or detected.max() >= truth.shape[0]):
        raise InputError("detected indices out of range")
    n_true = int(truth.sum())
    hits = int(truth[detected].sum()) if detected.size else 0
    if detected.size:
        precision = hits / detected.size
    else:
        precision = 1.0 if n_true == 0 else 0.0
    recall = hits / n_true if n_true else 1.0
    return DetectionMetrics(precision, recall, 1.0 if significant else 0.0, int(detected.size))


# -- detectors ---------------------------------------------------------------

class Detector:
    """A method reduced to a scalar statistic plus the points it flags."""

    name = ""

    def detect(self, y) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def statistic(self, y) -> float:
        return self.detect(y)[0]


class ScanDetector(Detector):
    def __init__(self, name: str, x, hp: Hyperparams, config: ScanConfig):
        self.name = name
        self.scanner = Scanner(x, hp, config)

    def statistic(self, y) -> float:
        return self.scanner.max_llr(y)

    def detect(self, y):
        sc = self.scanner
        W, _, llr = sc.score(y)
        if sc.config.scan == "gpns":
            flat = int(np.argmax(llr))
            i, kk = divmod(flat, llr.shape[1])
            best = float(llr[i, kk])
            members = sc.members[i][:kk + 1] if best > 0 else np.zeros(0, dtype=int)
            return best, members
        i = int(np.argmax(llr))
        return float(llr[i]), sc.members[i][W[i]]


class OutlierDetector(Detector):
    """Per-point leave-one-out posterior tail test.

    Each point's residual is standardized against its posterior given all
    other points; the statistic is the largest z and the flagged set the
    ``n_flag`` highest-scoring points (it is told the anomaly size).
    """

    name = "gp-outlier"

    def __init__(self, x, hp: Hyperparams, n_flag: int):
        self.model = HoldoutModel(x, hp)
        self.scale = np.sqrt(np.diag(self.model.precision))
        self.n_flag = n_flag

    def z(self, y) -> np.ndarray:
        return self.model.weighted_residual(y) / self.scale

    def statistic(self, y) -> float:
        return float(self.z(y).max())

    def detect(self, y):
        z = self.z(y)
        order = np.argsort(-z, kind="stable")
        return float(z[order[0]]), np.sort(order[:self.n_flag])


def make_detector(name: str, x, hp: Hyperparams, k: int, n_flag: int | None = None) -> Detector:
    pos = "positive"
    if name in GPSS_METHODS:
        variant = name[len("gpss-"):]
        return ScanDetector(name, x, hp, ScanConfig("gpss", k=k, method=SearchMethod(variant, direction=pos)))
    if name == "gpns":
        return ScanDetector(name, x, hp, ScanConfig("gpns", k_max=k, method=SearchMethod(direction=pos)))
    if name == "independent":
        cfg = ScanConfig("gpss", k=k, method=SearchMethod(direction=pos), covariance="independent")
        return ScanDetector(name, x, hp, cfg)
    if name == "gp-outlier":
        return OutlierDetector(x, hp, n_flag or k)
    raise InputError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


# -- trial loop --------------------------------------------------------------

@dataclass
class _Accumulator:
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    power: list = field(default_factory=list)
    size: list = field(default_factory=list)
    ms: list = field(default_factory=list)

    def add(self, m: DetectionMetrics, ms: float):
        self.precision.append(m.precision)
        self.recall.append(m.recall)
        self.power.append(m.power_at_alpha)
        self.size.append(m.detected_size)
        self.ms.append(ms)


def _threshold(null_stats: np.ndarray, alpha: float) -> float:
    return float(np.sort(null_stats)[order_statistic_index(alpha, null_stats.shape[0]) - 1])


def run_trials(conditions, trials: int, methods, config: ExperimentConfig = ExperimentConfig()):
    """Evaluate ``methods`` on each ``(factor, density)`` condition.

    Returns ``{(condition index, method): DetectionMetrics averaged over trials}``
    plus mean wall-clock per trial in ms, as ``(metrics, ms)`` pairs.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise InputError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    conditions = [(float(f), float(d)) for f, d in conditions]
    x = grid_covariates(config.grid_side)
    acc = {(c, m): _Accumulator() for c in range(len(conditions)) for m in methods}
    fixed: dict = {}

    def detectors_for(hp, n_flag):
        key = (id(hp), n_flag)
        if key not in fixed:
            fixed[key] = {m: make_detector(m, x, hp, config.k, n_flag) for m in methods}
        return fixed[key]

    for t in range(trials):
        base = Dataset(x, sample_prior(x, config.hp, _rng(config.seed, t, _STREAM_DATA)),
                       names=("gx", "gy"))
        inj_seed = int(np.random.SeedSequence([config.seed, t, _STREAM_INJECT]).generate_state(1)[0])
        null_seed = [config.seed, t, _STREAM_NULL]
        nulls_cache: dict = {}
        for c, (factor, density) in enumerate(conditions):
            spec = InjectionSpec(factor, config.k, density, inj_seed)
            data, truth = inject_anomaly(base, spec)
            hp = config.hp
            if config.refit:
                hp = fit_hyperparameters(data, config.hp, FitConfig(seed=config.seed + t))
                dets = {m: make_detector(m, x, hp, config.k, spec.n_anomalous) for m in methods}
            else:
                dets = detectors_for(hp, spec.n_anomalous)
            null_ys = None
            for m in methods:
                det = dets[m]
                start = time.perf_counter()
                stat, detected = det.detect(data.y)
                ckey = (m, spec.n_anomalous)
                if config.refit or ckey not in nulls_cache:
                    if null_ys is None:
                        holdout = HoldoutModel(x, hp)
                        null_ys = [holdout.sample(_rng(*null_seed, r))
                                   for r in range(config.replicates)]
                    nulls_cache[ckey] = np.array([det.statistic(v) for v in null_ys])
                thr = _threshold(nulls_cache[ckey], config.alpha)
                ms = 1e3 * (time.perf_counter() - start)
                acc[(c, m)].add(evaluate_detection(detected, truth, stat > thr), ms)
        log.info("trial %d/%d done", t + 1, trials)

    out = {}
    for key, a in acc.items():
        out[key] = (DetectionMetrics(float(np.mean(a.precision)), float(np.mean(a.recall)),
                                     float(np.mean(a.power)), int(round(np.mean(a.size)))),
                    float(np.mean(a.ms)))
    return out


def _metric_rows(results, labels, methods, k, timing):
    rows = []
    for c, label in enumerate(labels):
        for m in methods:
            met, ms = results[(c, m)]
            rows.append({"method": m, "k": k, "factor_or_density": label,
                         "precision": met.precision, "recall": met.recall,
                         "power": met.power_at_alpha, "detected_size": met.detected_size,
                         "wallclock_ms": ms if timing else None})
    return rows


def run_factor_sweep(factors=DEFAULT_FACTORS, trials: int = 50, methods=METHODS,
                     config: ExperimentConfig = ExperimentConfig(), density: float = 1.0):
    """Precision / recall / power per (factor, method) at a fixed density."""
    res = run_trials([(f, density) for f in factors], trials, methods, config)
    return _metric_rows(res, list(factors), list(methods), config.k, config.timing)


def run_density_sweep(densities=DEFAULT_DENSITIES, trials: int = 20,
                      methods=GPSS_METHODS + ("gpns",),
                      config: ExperimentConfig = ExperimentConfig(), factor: float = 2.0):
    """Metrics per (density, method) at a fixed factor."""
    for d in densities:
        if not 0 < d <= 1:
            raise InputError("densities must lie in (0, 1]")
    res = run_trials([(factor, d) for d in densities], trials, methods, config)
    return _metric_rows(res, list(densities), list(methods), config.k, config.timing)


# -- approximation ratio -----------------------------------------------------

APPROX_METHODS = ("beta-max", "grq", "stepwise")


def _ratio_instance(config: ExperimentConfig, k: int, trial: int, diagonal: bool,
                    factor: float, density: float):
    x = grid_covariates(config.grid_side)
    base = Dataset(x, sample_prior(x, config.hp, _rng(config.seed, trial, _STREAM_DATA)))
    inj_seed = int(np.random.SeedSequence([config.seed, trial, _STREAM_INJECT]).generate_state(1)[0])
    data, _ = inject_anomaly(base, InjectionSpec(factor, k, density, inj_seed))
    cov = "independent" if diagonal else "gp"
    return data, Scanner(x, config.hp, ScanConfig("gpss", k=k, covariance=cov,
                                                  method=SearchMethod(direction="positive")))


def approx_ratios(trials: int, k: int, config: ExperimentConfig = ExperimentConfig(),
                  methods=APPROX_METHODS, diagonal: bool = False,
                  factor: float = 1.5, density: float = 0.5) -> dict[str, np.ndarray]:
    """Per trial, max LLR found by each method over all neighborhoods divided
    by the exhaustive maximum over the same neighborhoods."""
    if k > EXHAUSTIVE_CAP:
        raise SearchRefusedError(f"k={k} exceeds the exhaustive cap {EXHAUSTIVE_CAP}")
    out = {m: np.empty(trials) for m in methods}
    for t in range(trials):
        data, sc = _ratio_instance(config, k, t, diagonal, factor, density)
        pr = sc._weighted(data.y)
        best = {}
        for variant in tuple(methods) + ("exhaustive",):
            method = SearchMethod(variant, direction="positive")
            top = -np.inf
            for _, ids, E in sc._groups:
                top = max(top, float(np.max(search_batch(E, pr[ids], method)[2])))
            best[variant] = top
        for m in methods:
            out[m][t] = best[m] / best["exhaustive"]
    return out


def run_approx_ratio(trials: int = 50, ks=(10,), config: ExperimentConfig = ExperimentConfig(),
                     methods=APPROX_METHODS, diagonal: bool = False):
    """Distributional summary of the approximation ratio per method and k."""
    rows = []
    for k in ks:
        ratios = approx_ratios(trials, k, config, methods, diagonal)
        for m in methods:
            r = ratios[m]
            rows.append({"method": m, "k": k, "trials": trials,
                         "median": float(np.median(r)), "mean": float(np.mean(r)),
                         "min": float(np.min(r)), "max": float(np.max(r)),
                         "frac_optimal": float(np.mean(r == 1.0))})
    return rows


# -- runtime -----------------------------------------------------------------

def _timed(fn, repeats: int = 1) -> float:
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return 1e3 * best


def run_runtime_bench(ks=(6, 9, 12, 15, 18), config: ExperimentConfig = ExperimentConfig(),
                      exhaustive_neighborhoods: int = 4, repeats: int = 1):
    """Wall-clock per method as the neighborhood size grows.

    GPSS and GPNS times cover building the scanner (all posteriors) and one
    scan of the full grid.  The exhaustive row times
    ``exhaustive_neighborhoods`` neighborhoods only and reports that count.
    """
    x = grid_covariates(config.grid_side)
    data = synth_generate(config.grid_side, config.hp, _rng(config.seed, 0, _STREAM_DATA))
    rows = []
    for k in ks:
        for name in GPSS_METHODS + ("gpns",):
            if name == "gpns":
                cfg = ScanConfig("gpns", k_max=k, method=SearchMethod(direction="positive"))
            else:
                cfg = ScanConfig("gpss", k=k, method=SearchMethod(name[5:], direction="positive"))
            holder = {}

            def run():
                holder["sc"] = Scanner(x, config.hp, cfg)
                holder["sc"].score(data.y)
            ms = _timed(run, repeats)
            rows.append({"method": name, "k": k, "wallclock_ms": ms,
                         "n_posteriors": holder["sc"].n_posteriors, "n_neighborhoods": data.n})
        if k > EXHAUSTIVE_CAP:
            log.info("exhaustive refused at k=%d (cap %d)", k, EXHAUSTIVE_CAP)
            continue
        sc = Scanner(x, config.hp, ScanConfig("gpss", k=k))
        pr = sc._weighted(data.y)
        _, ids, E = sc._groups[0]
        nb = min(exhaustive_neighborhoods, ids.shape[0])
        ex = SearchMethod("exhaustive", direction="positive")
        ms = _timed(lambda: search_batch(E[:nb], pr[ids[:nb]], ex), repeats)
        rows.append({"method": "exhaustive", "k": k, "wallclock_ms": ms,
                     "n_posteriors": nb, "n_neighborhoods": nb})
    return rows


# -- table output ------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_table(rows, columns=None, echo: dict | None = None) -> str:
    """CSV text; ``echo`` lines are written first as ``# key=value`` comments."""
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else ()))
    buf = io.StringIO()
    for key, val in (echo or {}).items():
        buf.write(f"# {key}={json.dumps(val, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()
