"""CSV emission for episode reports and threshold-vs-k sweeps."""

from __future__ import annotations

import csv
import os

from .episode import EpisodeReport

COLUMNS = ("attack", "success-rate", "mean-queries", "sd-queries", "detections", "raw-l2-detections")
SWEEP_COLUMNS = ("k", "tau")


def report_row(r: EpisodeReport) -> dict:
    return {"attack": r.attack, "success-rate": r.success_rate, "mean-queries": r.mean_queries,
            "sd-queries": r.sd_queries, "detections": r.detections, "raw-l2-detections": r.raw_detections}


def _open(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    return open(path, "w", newline="")


def emit_report(reports, path) -> None:
    """One row per report, fixed column order.  Floats are written with repr
    so a parse gives back the exact values."""
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in reports:
            row = r if isinstance(r, dict) else report_row(r)
            w.writerow([row["attack"]] + [repr(float(row[c])) for c in COLUMNS[1:]])


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != COLUMNS:
        raise ValueError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
    return [{"attack": r["attack"], **{c: float(r[c]) for c in COLUMNS[1:]}} for r in rows]


def emit_sweep(pairs, path) -> None:
    with _open(path) as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for k, tau in pairs:
            w.writerow([int(k), repr(float(tau))])


def read_sweep(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["k"]), float(r["tau"])) for r in csv.DictReader(fh)]


def format_table(reports) -> str:
    rows = [r if isinstance(r, dict) else report_row(r) for r in reports]
    out = [f"{'attack':<28} {'success':>8} {'queries':>16} {'det':>8} {'raw det':>8}"]
    for r in rows:
        q = f"{r['mean-queries']:,.0f}±{r['sd-queries']:,.0f}"
        out.append(f"{r['attack']:<28} {r['success-rate']:>8.0%} {q:>16} {r['detections']:>8.1f} "
                   f"{r['raw-l2-detections']:>8.1f}")
    return "\n".join(out)
