"""Command-line entry point: ``gpscan {fit,scan,test,synth,aggregate,bench}``.

Settings come from flags, optionally seeded by ``--config FILE`` holding
flat ``key = value`` lines (keys are flag names); explicit flags win.  The
effective settings are echoed into every output.  Logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import data_io, experiments
from .errors import GPScanError
from .gp import Dataset, FitConfig, Hyperparams, default_init, fit_hyperparameters
from .scanner import ScanConfig, Scanner, deduplicate
from .search import SearchMethod
from .significance import randomization_threshold, significance_report

log = logging.getLogger("gpscan")

_NOT_ECHOED = {"out", "config", "log_level", "func"}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise argparse.ArgumentTypeError(f"{path}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


# -- shared option groups ----------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="output path (default stdout)")
    p.add_argument("--log-level", default="WARNING")


def _add_hp(p):
    p.add_argument("--lengthscale", type=float, default=3.0)
    p.add_argument("--signal-variance", type=float, default=1.0)
    p.add_argument("--noise-variance", type=float, default=0.1)
    p.add_argument("--mean-bias", type=float, default=2.0)


def _add_scan(p):
    p.add_argument("--data", required=True, help="dataset CSV (covariates, y[, stream][, truth])")
    p.add_argument("--hp", help="hyperparameter JSON from `fit`; fitted on the fly if omitted")
    p.add_argument("--scan", choices=("gpss", "gpns"), default="gpss")
    p.add_argument("--method", default="beta-max", help="beta-max, grq, stepwise or exhaustive")
    p.add_argument("--direction", choices=("positive", "negative", "both"), default="positive")
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--k-max", type=int, default=None, help="largest GPNS size (default --k)")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--covariance", choices=("gp", "independent"), default="gp")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--restarts", type=int, default=3)


def _hp_from_args(args) -> Hyperparams:
    return Hyperparams.isotropic(2, args.lengthscale, args.signal_variance, args.noise_variance,
                                 mean_bias=args.mean_bias)


def _experiment_config(args) -> experiments.ExperimentConfig:
    return experiments.ExperimentConfig(grid_side=args.grid, hp=_hp_from_args(args), k=args.k,
                                        alpha=args.alpha, replicates=args.replicates,
                                        seed=args.seed, timing=getattr(args, "timing", False))


def _emit(args, text: str):
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)


def _echo(args) -> dict:
    out = {}
    for key, val in sorted(vars(args).items()):
        if key in _NOT_ECHOED:
            continue
        out[key] = val if isinstance(val, (int, float, str, bool)) or val is None else str(val)
    if args.config:
        with open(args.config) as fh:
            out["config_file"] = fh.read()
    return out


# -- subcommands -------------------------------------------------------------

def _streams(data: Dataset):
    """Per-stream datasets, their file rows and labels."""
    if data.stream_id is None:
        return [data], np.arange(data.n), None
    labels = np.unique(data.stream_id)
    parts = [data.subset(np.flatnonzero(data.stream_id == s)) for s in labels]
    rows = np.concatenate([np.flatnonzero(data.stream_id == s) for s in labels])
    return parts, rows, labels


def _fit(part: Dataset, args) -> Hyperparams:
    return fit_hyperparameters(part, default_init(part), FitConfig(restarts=args.restarts, seed=args.seed))


def _hps_for(parts, args):
    if args.hp:
        hp = data_io.load_hyperparams(args.hp)
        if isinstance(hp, Hyperparams):
            return [hp] * len(parts)
        if len(hp) != len(parts):
            raise GPScanError("hyperparameter file does not cover every stream")
        return [hp[k] for k in sorted(hp)]
    log.info("fitting hyperparameters for %d stream(s)", len(parts))
    return [_fit(p, args) for p in parts]


def cmd_fit(args):
    data, _ = data_io.load_dataset_csv(args.data)
    parts, _, labels = _streams(data)
    hps = [_fit(p, args) for p in parts]
    if labels is None:
        payload = hps[0].to_dict()
    else:
        payload = {"streams": {str(int(s)): h.to_dict() for s, h in zip(labels, hps)}}
    _emit(args, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _scan_setup(args):
    data, truth = data_io.load_dataset_csv(args.data)
    parts, rows, labels = _streams(data)
    hps = _hps_for(parts, args)
    method = SearchMethod(args.method, max_iters=args.max_iters, direction=args.direction)
    cfg = ScanConfig(scan=args.scan, k=args.k, k_max=args.k_max or args.k, method=method,
                     covariance=args.covariance)
    scanner = Scanner([p.x for p in parts], hps, cfg)
    ys = parts[0].y if len(parts) == 1 else [p.y for p in parts]
    x_all = np.concatenate([p.x for p in parts])
    return data, truth, parts, rows, labels, hps, cfg, scanner, ys, x_all


def cmd_scan(args):
    data, truth, parts, rows, labels, hps, cfg, scanner, ys, x_all = _scan_setup(args)
    results = scanner.scan(ys)
    if args.dedupe is not None:
        results = deduplicate(results, args.dedupe)
    results = results[:args.top]
    report = None
    if not args.no_test:
        null = randomization_threshold(None, hps, cfg, args.replicates, args.alpha, args.seed, scanner)
        report = significance_report(results, null, cfg)
        log.info("threshold %.6g; %d significant", null.threshold, int(report.significant.sum()))
    extra = {}
    if truth is not None:
        top = results[0]
        significant = bool(report.significant[0]) if report is not None else False
        met = experiments.evaluate_detection(rows[top.included], truth, significant)
        extra["evaluation"] = {"precision": met.precision, "recall": met.recall,
                               "detected_size": met.detected_size, "significant": significant}
        log.info("top result precision %.3f recall %.3f", met.precision, met.recall)
    text = data_io.export_results(results, None, args.format, x_all, data.names, report,
                                  _echo(args), extra, rows, labels)
    _emit(args, text)


def cmd_test(args):
    data, truth, parts, rows, labels, hps, cfg, scanner, ys, x_all = _scan_setup(args)
    observed = scanner.max_llr(ys)
    null = randomization_threshold(None, hps, cfg, args.replicates, args.alpha, args.seed, scanner)
    payload = {"version": data_io.RESULTS_SCHEMA_VERSION, "config_echo": _echo(args),
               "alpha": null.alpha, "replicates": null.replicates, "threshold": null.threshold,
               "observed_max_llr": observed, "p_value": float(null.p_value(observed)),
               "significant": bool(observed > null.threshold),
               "null_max_llrs": [float(v) for v in null.null_max_llrs]}
    _emit(args, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args):
    hp = _hp_from_args(args)
    base = experiments.synth_generate(args.grid, hp, [args.seed, 0, 0])
    spec = experiments.InjectionSpec(args.factor, args.k, args.density,
                                     int(np.random.SeedSequence([args.seed, 0, 1]).generate_state(1)[0]))
    data, truth = experiments.inject_anomaly(base, spec)
    if args.hp_out:
        data_io.save_hyperparams(hp, args.hp_out)
    _emit(args, data_io.dataset_csv_text(data, truth))


def cmd_aggregate(args):
    mapping = {k: v for k, v in (("lat", args.lat_col), ("lon", args.lon_col),
                                 ("timestamp", args.time_col), ("stream", args.stream_col),
                                 ("count", args.count_col)) if v}
    table = data_io.load_events_csv(args.events, mapping, args.max_failure_rate)
    bbox = tuple(_floats(args.bbox)) if args.bbox else None
    tb = args.bin
    try:
        tb = float(tb)
    except ValueError:
        pass
    spec = data_io.GridSpec(args.cell_size, tb, args.unit, bbox)
    out = data_io.grid_aggregate(table.records, spec, by_stream=args.by_stream,
                                 transform="sqrt" if args.sqrt else None)
    if isinstance(out, dict):
        labels = list(out)
        log.info("streams: %s", ", ".join(f"{i}={lab or '<none>'}" for i, lab in enumerate(labels)))
        parts = [out[lab] for lab in labels]
        out = Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                      np.repeat(np.arange(len(parts)), [p.n for p in parts]), parts[0].names)
    _emit(args, data_io.dataset_csv_text(out))


def cmd_bench(args):
    cfg = _experiment_config(args)
    echo = _echo(args)
    if args.kind == "factor":
        rows = experiments.run_factor_sweep(args.factors, args.trials, args.methods, cfg, args.density)
        cols = experiments.METRIC_COLUMNS
    elif args.kind == "density":
        methods = args.methods if args.methods != list(experiments.METHODS) else \
            list(experiments.GPSS_METHODS) + ["gpns"]
        rows = experiments.run_density_sweep(args.densities, args.trials, methods, cfg, args.factor)
        cols = experiments.METRIC_COLUMNS
    elif args.kind == "ratio":
        ks = args.ks if args.ks else [args.k]
        rows = experiments.run_approx_ratio(args.trials, ks, cfg, diagonal=args.diagonal)
        cols = ("method", "k", "trials", "median", "mean", "min", "max", "frac_optimal")
    else:
        ks = args.ks if args.ks else [6, 9, 12, 15, 18]
        rows = experiments.run_runtime_bench(ks, cfg, args.exhaustive_neighborhoods)
        cols = ("method", "k", "wallclock_ms", "n_posteriors", "n_neighborhoods")
    _emit(args, experiments.format_table(rows, cols, echo))


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpscan", description="Gaussian process subset scanning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit GP hyperparameters to a dataset CSV")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="run GPSS or GPNS and rank neighborhoods")
    _add_common(p)
    _add_scan(p)
    p.add_argument("--top", type=int, default=10, help="number of ranked results to report")
    p.add_argument("--dedupe", type=float, default=None,
                   help="drop results overlapping a better one by more than this fraction")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--no-test", action="store_true", help="skip randomization testing")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("test", help="randomization test of the maximum scan score")
    _add_common(p)
    _add_scan(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("synth", help="generate a GP grid dataset with an injected anomaly")
    _add_common(p)
    _add_hp(p)
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--factor", type=float, default=1.0)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--k", type=int, default=15, help="size of the injected neighborhood")
    p.add_argument("--hp-out", help="also write the generating hyperparameters here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("aggregate", help="bin an event CSV onto a space-time grid")
    _add_common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--cell-size", type=float, required=True)
    p.add_argument("--unit", choices=("deg", "m"), default="deg")
    p.add_argument("--bin", default="day", help="day, week, month or a length in days")
    p.add_argument("--bbox", help="lat_min,lat_max,lon_min,lon_max")
    p.add_argument("--by-stream", action="store_true")
    p.add_argument("--sqrt", action="store_true", help="square-root transform the counts")
    p.add_argument("--max-failure-rate", type=float, default=0.01)
    for col in ("lat", "lon", "time", "stream", "count"):
        p.add_argument(f"--{col}-col", default=None)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("bench", help="synthetic benchmarks")
    _add_common(p)
    _add_hp(p)
    p.add_argument("kind", choices=("factor", "ratio", "runtime", "density"))
    p.add_argument("--grid", type=int, default=20)
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--ks", type=_ints, default=None, help="comma-separated k list (ratio, runtime)")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--factors", type=_floats, default=list(experiments.DEFAULT_FACTORS))
    p.add_argument("--densities", type=_floats, default=list(experiments.DEFAULT_DENSITIES))
    p.add_argument("--factor", type=float, default=2.0, help="factor for the density sweep")
    p.add_argument("--density", type=float, default=1.0, help="density for the factor sweep")
    p.add_argument("--methods", type=_strs, default=list(experiments.METHODS))
    p.add_argument("--diagonal", action="store_true", help="ratio bench on diagonal covariance")
    p.add_argument("--exhaustive-neighborhoods", type=int, default=4)
    p.add_argument("--timing", action="store_true", help="fill the wallclock_ms column")
    p.set_defaults(func=cmd_bench)
    return parser


def _config_argv(argv, path) -> list[str]:
    """Flags for config entries not given explicitly on the command line."""
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    extra = []
    for key, val in read_config(path).items():
        flag = "--" + key.replace("_", "-")
        if flag in given or key in ("config", "out"):
            continue
        if val.lower() in ("true", "false"):
            if val.lower() == "true":
                extra.append(flag)
            continue
        extra += [flag, val]
    return extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    try:
        path = pre.parse_known_args(argv)[0].config
        args = parser.parse_args(argv + (_config_argv(argv, path) if path else []))
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, argparse.ArgumentTypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"gpscan: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s msg=%(message)s", force=True)
    try:
        args.func(args)
    except (GPScanError, OSError, ValueError, ArithmeticError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


def cli_main(argv=None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
