"""CSV and JSON writers with byte-stable formatting.

Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly; JSON keys are sorted and non-finite floats become null.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import CoherenceSeries, MomentumReport, coherence_series
from .core import RoundRecord

SCHEMA_VERSION = 1

#: staleness buckets for the record log: (label, low, high inclusive; None = open)
STALENESS_BUCKETS = (
    ("tau_0", 0, 0), ("tau_1", 1, 1), ("tau_2_3", 2, 3), ("tau_4_7", 4, 7),
    ("tau_8_15", 8, 15), ("tau_16_31", 16, 31), ("tau_32p", 32, None),
)

RECORD_COLUMNS = ["t", "f_w", "grad_norm_sq", "delta_w_norm", "coherence", "selected"] + [
    b[0] for b in STALENESS_BUCKETS
]


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def _bucket_counts(tau: np.ndarray) -> list[int]:
    out = []
    for _, lo, hi in STALENESS_BUCKETS:
        mask = tau >= lo if hi is None else (tau >= lo) & (tau <= hi)
        out.append(int(mask.sum()))
    return out


def fill_coherence(records: list[RoundRecord], epsilon_guard: float = 1e-16) -> CoherenceSeries | None:
    if not records:
        return None
    series = coherence_series(np.stack([r.true_grad for r in records]), epsilon_guard)
    for rec, mu in zip(records, series.mu):
        rec.coherence = float(mu)
    return series


def write_records(path, records: list[RoundRecord]) -> Path:
    d = records[0].delta_w.shape[0] if records else 0
    with_w = bool(records) and records[0].w is not None
    header = RECORD_COLUMNS + ([f"w_{i}" for i in range(d)] if with_w else [])

    def rows():
        for r in records:
            row = [r.t, r.loss, r.grad_norm_sq, float(np.linalg.norm(r.delta_w)), r.coherence,
                   ";".join(str(int(k)) for k in r.selected)]
            row += _bucket_counts(r.staleness)
            if with_w:
                row += [float(v) for v in r.w]
            yield row

    return write_csv(path, header, rows())


def write_momentum(path, report: MomentumReport) -> Path:
    def rows():
        for i, t in enumerate(report.rounds):
            for c in range(report.residual.shape[1]):
                yield [int(t), c, report.residual[i, c], report.stderr[i, c], report.z[i, c]]

    return write_csv(path, ["t", "coord", "residual", "stderr", "z"], rows())


def write_coherence(path, series: CoherenceSeries) -> Path:
    rows = ([t, series.mu[t], series.running_min[t], int(series.skipped[t])] for t in range(series.mu.shape[0]))
    return write_csv(path, ["t", "mu_t", "running_min", "skipped"], rows)


def jsonable(value):
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"schema_version": SCHEMA_VERSION, "software_version": __version__, **summary}
    path.write_text(json.dumps(jsonable(body), sort_keys=True, indent=2) + "\n")
    return path
