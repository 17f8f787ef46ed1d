"""Machine-readable run reports, trace tables and rendered figures.

Reports are JSON documents validated against the versioned schemas shipped
with the package; traces are flat CSV with one row per outer iteration.  The
figure helpers render the trace panels (termination rank and suboptimality
gap per iteration) and trajectory overlays to image files next to the
delimited output.
"""

from __future__ import annotations

import csv
import io
import json
from importlib import resources

import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .gnc import GncTrace
from .manifolds import Estimate

TRACE_HEADER = ["iter", "mu", "weighted_cost", "robust_cost", "rank", "gap",
                "certified", "ms"]

RUN_REPORT_SCHEMA_VERSION = "1"


def _load_schema(name: str) -> dict:
    with resources.files("certignc.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def run_report_schema() -> dict:
    return _load_schema("run_report_v1.json")


def bench_report_schema() -> dict:
    return _load_schema("bench_report_v1.json")


def validate_run_report(report: dict) -> None:
    jsonschema.validate(report, run_report_schema())


def validate_bench_report(report: dict) -> None:
    jsonschema.validate(report, bench_report_schema())


def trace_rows(trace: GncTrace) -> list[dict]:
    rows = []
    for rec in trace.records:
        rows.append({
            "iter": rec.iteration,
            "mu": None if rec.mu is None else float(rec.mu),
            "weighted_cost": float(rec.weighted_cost),
            "robust_cost": None if rec.robust_cost is None else float(rec.robust_cost),
            "rank": int(rec.termination_rank),
            "gap": None if rec.gap is None else float(rec.gap),
            "gap_is_relative": rec.gap_is_relative,
            "certified": rec.certified,
            "ms": float(rec.wall_ms),
        })
    return rows


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace_csv(rows: list[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in rows:
        writer.writerow([_csv_cell(row[k]) for k in TRACE_HEADER])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def build_run_report(config: dict, rows: list[dict], metrics: dict,
                     termination: str, certified_all: bool,
                     total_wall_ms: float) -> dict:
    report = {
        "schema_version": RUN_REPORT_SCHEMA_VERSION,
        "config": config,
        "trace": rows,
        "metrics": {
            "translation_rmse": metrics.get("translation_rmse"),
            "rotation_rmse_deg": metrics.get("rotation_rmse_deg"),
            "outlier_precision": metrics.get("outlier_precision"),
            "outlier_recall": metrics.get("outlier_recall"),
        },
        "termination": termination,
        "certified_all_stages": certified_all,
        "total_wall_ms": total_wall_ms,
    }
    validate_run_report(report)
    return report


def write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_trace_figure(rows: list[dict], path) -> None:
    """Two stacked panels: staircase termination rank and suboptimality gap
    per outer iteration."""
    iters = [r["iter"] for r in rows]
    ranks = [r["rank"] for r in rows]
    gaps = [(r["iter"], r["gap"]) for r in rows if r["gap"] is not None]

    fig, (ax_rank, ax_gap) = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
    ax_rank.step(iters, ranks, where="mid", marker="o", ms=3)
    ax_rank.set_ylabel("termination rank")
    ax_rank.grid(alpha=0.3)
    if gaps:
        xs, ys = zip(*gaps)
        ax_gap.semilogy(xs, [max(abs(y), 1e-16) for y in ys], marker="o", ms=3)
    ax_gap.set_ylabel("suboptimality gap")
    ax_gap.set_xlabel("outer iteration")
    ax_gap.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_trajectory_figure(estimate: Estimate, path,
                             ground_truth: Estimate | None = None) -> None:
    """Top-down overlay of estimated and reference trajectories."""
    fig, ax = plt.subplots(figsize=(5, 5))

    def xy(est: Estimate):
        ids = sorted(est.translations)
        P = np.array([est.translations[i][:2] for i in ids])
        L = (np.array([est.landmarks[k][:2] for k in sorted(est.landmarks)])
             if est.landmarks else np.empty((0, 2)))
        return P, L

    P, L = xy(estimate)
    ax.plot(P[:, 0], P[:, 1], "-o", ms=2.5, lw=1, label="estimate")
    if len(L):
        ax.scatter(L[:, 0], L[:, 1], marker="x", s=25, label="landmarks")
    if ground_truth is not None:
        Pg, Lg = xy(ground_truth)
        ax.plot(Pg[:, 0], Pg[:, 1], "--", lw=1, color="gray", label="ground truth")
        if len(Lg):
            ax.scatter(Lg[:, 0], Lg[:, 1], marker="+", s=25, color="gray")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_bench_figure(rows: list[dict], path, metric="translation_rmse") -> None:
    """Per-cell distribution of a benchmark metric, one group per rate."""
    cells: dict[tuple, list[float]] = {}
    for row in rows:
        if row["status"] != "ok" or row.get(metric) is None:
            continue
        cells.setdefault((row["mode"], row["init"]), []).append((row["rate"], row[metric]))

    fig, ax = plt.subplots(figsize=(6, 4))
    markers = ["o", "s", "^", "d", "v"]
    for k, ((mode, init), pts) in enumerate(sorted(cells.items())):
        rates = sorted({r for r, _ in pts})
        means = [float(np.mean([v for r, v in pts if r == rate])) for rate in rates]
        ax.plot(rates, means, marker=markers[k % len(markers)],
                label=f"{mode}/{init}")
    ax.set_xlabel("outlier rate")
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
