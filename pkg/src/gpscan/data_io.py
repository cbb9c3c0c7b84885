"""Event ingestion, space-time grid aggregation and result export.

Event CSV columns (renameable through ``mapping``): ``lat``, ``lon``,
``timestamp`` (ISO-8601), optional ``stream`` and ``count``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import IngestionError, InputError
from .gp import Dataset, Hyperparams

log = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
DEFAULT_MAPPING = {"lat": "lat", "lon": "lon", "timestamp": "timestamp",
                   "stream": "stream", "count": "count"}
METERS_PER_DEGREE = 111_320.0
_FIXED_BINS = {"day": 1.0, "week": 7.0}


@dataclass(frozen=True)
class EventRecord:
    latitude: float
    longitude: float
    timestamp: datetime
    stream_label: str | None = None
    count: int = 1


@dataclass
class EventTable:
    """Parsed events plus the rows that failed, as ``(line_number, reason)``."""

    records: list[EventRecord] = field(default_factory=list)
    failures: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts


def _fmt(v: float) -> str:
    return repr(float(v))


def load_events_csv(path, mapping: dict | None = None,
                    max_failure_rate: float = 0.01) -> EventTable:
    """Parse an event CSV.  Bad rows are collected; too many raise."""
    cols = {**DEFAULT_MAPPING, **(mapping or {})}
    table = EventTable()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for req in ("lat", "lon", "timestamp"):
            if cols[req] not in header:
                raise InputError(f"column {cols[req]!r} (for {req}) missing from {path}")
        has_stream = cols["stream"] in header
        has_count = cols["count"] in header
        n_rows = 0
        for line, row in enumerate(reader, start=2):
            n_rows += 1
            try:
                lat = float(row[cols["lat"]])
                lon = float(row[cols["lon"]])
                if not (math.isfinite(lat) and math.isfinite(lon)):
                    raise ValueError("non-finite coordinate")
                ts = parse_timestamp(row[cols["timestamp"]])
                stream = (row[cols["stream"]] or None) if has_stream else None
                count = 1
                if has_count and row[cols["count"]] not in (None, ""):
                    count = int(row[cols["count"]])
                    if count < 0:
                        raise ValueError("negative count")
            except (ValueError, TypeError, KeyError) as exc:
                table.failures.append((line, str(exc)))
                continue
            table.records.append(EventRecord(lat, lon, ts, stream, count))
    if table.failures:
        log.warning("%d of %d rows failed to parse in %s", len(table.failures), n_rows, path)
        if len(table.failures) > max_failure_rate * n_rows:
            detail = "; ".join(f"line {ln}: {why}" for ln, why in table.failures[:5])
            raise IngestionError(
                f"{len(table.failures)}/{n_rows} rows failed (cap {max_failure_rate:.1%}): {detail}",
                table.failures)
    return table


def write_events_csv(events, path, mapping: dict | None = None):
    cols = {**DEFAULT_MAPPING, **(mapping or {})}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cols["lat"], cols["lon"], cols["timestamp"], cols["stream"], cols["count"]])
        for e in events:
            w.writerow([_fmt(e.latitude), _fmt(e.longitude), e.timestamp.isoformat(),
                        e.stream_label or "", e.count])


@dataclass(frozen=True)
class GridSpec:
    """Spatial cell size (degrees or meters) and temporal bin ('day', 'week',
    'month' or a length in days).  ``bbox`` is (lat_min, lat_max, lon_min, lon_max)."""

    cell_size: float
    temporal_bin: str | float = "day"
    unit: str = "deg"
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InputError("cell_size must be positive")
        if self.unit not in ("deg", "m"):
            raise InputError("unit must be 'deg' or 'm'")
        tb = self.temporal_bin
        if isinstance(tb, str):
            if tb not in ("day", "week", "month"):
                raise InputError("temporal_bin must be day, week, month or a positive number of days")
        elif not float(tb) > 0:
            raise InputError("temporal_bin must be positive")


def _month_start(y: int, m: int) -> datetime:
    y, m = y + (m - 1) // 12, (m - 1) % 12 + 1
    return datetime(y, m, 1)


def grid_aggregate(events, spec: GridSpec, by_stream: bool = False,
                   transform: str | None = None):
    """Count events per (cell, time bin) over the full grid, zeros included.

    Rows are ``(lat centre, lon centre, bin centre in days since the first
    bin)``.  Cells are half-open ``[low, high)``.  With ``by_stream`` returns
    ``{label: Dataset}`` sharing one grid.  ``transform='sqrt'`` applies a
    square root to the counts.
    """
    events = list(events)
    if not events:
        raise InputError("no events to aggregate")
    lat = np.array([e.latitude for e in events])
    lon = np.array([e.longitude for e in events])
    if spec.bbox is not None:
        lat0, lat1, lon0, lon1 = spec.bbox
    else:
        lat0, lat1, lon0, lon1 = lat.min(), lat.max(), lon.min(), lon.max()
    dlat = dlon = spec.cell_size
    if spec.unit == "m":
        dlat = spec.cell_size / METERS_PER_DEGREE
        dlon = spec.cell_size / (METERS_PER_DEGREE * math.cos(math.radians(0.5 * (lat0 + lat1))))
    if spec.bbox is not None:
        n_lat = max(int(math.ceil((lat1 - lat0) / dlat)), 1)
        n_lon = max(int(math.ceil((lon1 - lon0) / dlon)), 1)
    else:
        n_lat = int(math.floor((lat1 - lat0) / dlat)) + 1
        n_lon = int(math.floor((lon1 - lon0) / dlon)) + 1
    ci = np.floor((lat - lat0) / dlat).astype(int)
    cj = np.floor((lon - lon0) / dlon).astype(int)

    times = [e.timestamp for e in events]
    first = min(times)
    t0 = datetime(first.year, first.month, first.day)
    if spec.temporal_bin == "month":
        t0 = datetime(first.year, first.month, 1)
        tb = np.array([(t.year - t0.year) * 12 + t.month - t0.month for t in times])
        n_bins = int(tb.max()) + 1
        centers = np.array([
            ((_month_start(t0.year, t0.month + b) - t0)
             + (_month_start(t0.year, t0.month + b + 1) - _month_start(t0.year, t0.month + b)) / 2)
            / timedelta(days=1) for b in range(n_bins)])
    else:
        width = _FIXED_BINS.get(spec.temporal_bin, None) if isinstance(spec.temporal_bin, str) else None
        width = float(spec.temporal_bin) if width is None else width
        days = np.array([(t - t0) / timedelta(days=1) for t in times])
        tb = np.floor(days / width).astype(int)
        n_bins = int(tb.max()) + 1
        centers = (np.arange(n_bins) + 0.5) * width

    inside = (ci >= 0) & (ci < n_lat) & (cj >= 0) & (cj < n_lon)
    if not inside.all():
        log.info("%d events fall outside the bounding box", int((~inside).sum()))
    counts = np.array([e.count for e in events], dtype=float)
    flat = (ci * n_lon + cj) * n_bins + tb

    gi, gj, gb = np.meshgrid(np.arange(n_lat), np.arange(n_lon), np.arange(n_bins), indexing="ij")
    x = np.column_stack([lat0 + (gi.ravel() + 0.5) * dlat,
                         lon0 + (gj.ravel() + 0.5) * dlon,
                         centers[gb.ravel()]])
    size = n_lat * n_lon * n_bins

    def totals(mask):
        y = np.bincount(flat[mask & inside], weights=counts[mask & inside], minlength=size)
        return np.sqrt(y) if transform == "sqrt" else y

    if transform not in (None, "sqrt"):
        raise InputError("transform must be None or 'sqrt'")
    names = ("lat", "lon", "t")
    if not by_stream:
        return Dataset(x, totals(np.ones(len(events), dtype=bool)), names=names)
    labels = np.array([e.stream_label or "" for e in events])
    return {lab: Dataset(x, totals(labels == lab), names=names) for lab in sorted(set(labels))}


# -- datasets and hyperparameters on disk ------------------------------------

def dataset_csv_text(data: Dataset, truth=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(data.names) + ["y"]
    if data.stream_id is not None:
        header.append("stream")
    if truth is not None:
        header.append("truth")
    w.writerow(header)
    for i in range(data.n):
        row = [_fmt(v) for v in data.x[i]] + [_fmt(data.y[i])]
        if data.stream_id is not None:
            row.append(int(data.stream_id[i]))
        if truth is not None:
            row.append(int(bool(truth[i])))
        w.writerow(row)
    return buf.getvalue()


def write_dataset_csv(data: Dataset, path, truth=None):
    Path(path).write_text(dataset_csv_text(data, truth))


def load_dataset_csv(path) -> tuple[Dataset, np.ndarray | None]:
    """Read a dataset CSV: covariate columns then ``y`` [, ``stream``] [, ``truth``]."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if "y" not in header:
        raise InputError(f"{path} has no 'y' column")
    special = {"y", "stream", "truth"}
    xcols = [i for i, h in enumerate(header) if h not in special]
    arr = {h: i for i, h in enumerate(header)}
    try:
        x = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
        y = np.array([float(r[arr["y"]]) for r in body])
        sid = np.array([int(r[arr["stream"]]) for r in body]) if "stream" in arr else None
        truth = np.array([bool(int(r[arr["truth"]])) for r in body]) if "truth" in arr else None
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed dataset file {path}: {exc}") from exc
    return Dataset(x, y, sid, tuple(header[i] for i in xcols)), truth


def save_hyperparams(hps, path):
    """Write one hyperparameter set, or a ``{stream: Hyperparams}`` mapping."""
    if isinstance(hps, Hyperparams):
        payload = hps.to_dict()
    else:
        payload = {"streams": {str(k): v.to_dict() for k, v in hps.items()}}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_hyperparams(path):
    payload = json.loads(Path(path).read_text())
    if "streams" in payload:
        return {int(k): Hyperparams.from_dict(v) for k, v in payload["streams"].items()}
    return Hyperparams.from_dict(payload)


# -- results -----------------------------------------------------------------

def _coords(x_all: np.ndarray, names, idx: int) -> dict:
    return {n: float(v) for n, v in zip(names, x_all[idx])}


def results_payload(results, x_all, names, report=None, config_echo=None,
                    row_ids=None, stream_labels=None) -> dict:
    """JSON-ready ranking.  ``x_all`` are covariates indexed like result members.

    ``row_ids`` maps member positions to reported indices (e.g. input file
    rows) and ``stream_labels`` maps stream positions to their labels.
    """
    out = []
    for rank, r in enumerate(results, start=1):
        p = None if report is None else float(report.p_values[rank - 1])
        sig = False if report is None else bool(report.significant[rank - 1])
        streams = r.included_streams
        members = []
        for j, idx in enumerate(r.included.tolist()):
            rid = idx if row_ids is None else row_ids[idx]
            m = {"index": int(rid), **_coords(x_all, names, idx)}
            if streams is not None:
                s = int(streams[j])
                m["stream"] = int(s if stream_labels is None else stream_labels[s])
            members.append(m)
        seed_row = r.neighborhood.member_indices[0]
        seed_index = r.seed if row_ids is None else row_ids[seed_row]
        out.append({"rank": rank, "seed_index": int(seed_index), "k": r.neighborhood.k,
                    "seed": _coords(x_all, names, int(seed_row)),
                    "llr": float(r.llr), "beta": float(r.beta),
                    "p_value": p, "significant": sig, "members": members})
    payload = {"version": RESULTS_SCHEMA_VERSION, "config_echo": config_echo or {}, "results": out}
    if report is not None:
        payload["threshold"] = float(report.threshold)
        payload["alpha"] = float(report.alpha)
        payload["replicates"] = int(report.replicates)
    return payload


def export_results(results, path, fmt: str = "json", x_all=None, names=None,
                   report=None, config_echo=None, extra: dict | None = None,
                   row_ids=None, stream_labels=None):
    """Write ranked results as versioned JSON or as CSV with one row per
    (result, included member)."""
    results = list(results)
    if not results:
        raise InputError("no results to export")
    payload = results_payload(results, x_all, names, report, config_echo, row_ids, stream_labels)
    if extra:
        payload.update(extra)
    if fmt == "json":
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        if path is None or path == "-":
            return text
        Path(path).write_text(text)
        return None
    if fmt != "csv":
        raise InputError(f"unknown export format {fmt!r}")
    cols = (["rank", "seed_index"] + [f"seed_{n}" for n in names]
            + ["member_index", "member_stream"] + [f"member_{n}" for n in names]
            + ["beta", "llr", "p_value", "significant"])
    lines = []
    for res in payload["results"]:
        base = [res["rank"], res["seed_index"]] + [_fmt(res["seed"][n]) for n in names]
        tail = [_fmt(res["beta"]), _fmt(res["llr"]),
                "" if res["p_value"] is None else _fmt(res["p_value"]), int(res["significant"])]
        members = res["members"] or [None]
        for m in members:
            if m is None:
                mid = ["", ""] + [""] * len(names)
            else:
                mid = [m["index"], m.get("stream", "")] + [_fmt(m[n]) for n in names]
            lines.append(base + mid + tail)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for k, v in sorted((config_echo or {}).items()):
        buf.write(f"# {k}={json.dumps(v, sort_keys=True)}\n")
    for k, v in sorted((extra or {}).items()):
        buf.write(f"# {k}={json.dumps(v, sort_keys=True)}\n")
    w.writerow(cols)
    w.writerows(lines)
    if path is None or path == "-":
        return buf.getvalue()
    Path(path).write_text(buf.getvalue())
    return None


def load_results_json(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != RESULTS_SCHEMA_VERSION:
        raise InputError(f"unsupported results schema version {payload.get('version')!r}")
    return payload
