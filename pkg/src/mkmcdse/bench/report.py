"""CSV and JSON emission for benchmark results.

Every number is written with ``repr`` so identical results give identical
bytes. Wall-clock figures are left out unless asked for, since they would
make repeated runs differ.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import ScenarioConfig, config_echo
from .runner import TRACE_FIELDS, MetricsReport


def _num(x: Any) -> Any:
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return repr(x) if np.isfinite(x) else str(x)
    if isinstance(x, (np.integer, int)):
        return str(int(x))
    return x


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])
    return path


def metric_rows(report: MetricsReport, metric: str):
    """Rows ``(step, filter, group, value)`` of a per-step metric.

    Group-free series (iterations, minimum eigenvalue) use group ``all``;
    ``armse`` uses step ``all``.
    """
    for f in report.filters():
        if metric in ("rmse", "mae"):
            series = getattr(report, metric)[f]
            for g in report.groups:
                for t, v in enumerate(series[g]):
                    yield (t, f, g, v)
        elif metric == "armse":
            for g in report.groups:
                yield ("all", f, g, report.armse[f][g])
        elif metric == "iterations":
            for t, v in enumerate(report.iterations[f]):
                yield (t, f, "all", v)
        elif metric == "min_eig":
            for t, v in enumerate(report.min_eig[f]):
                yield (t, f, "all", v)
        else:
            raise ValueError(f"unknown metric {metric!r}")


METRICS = ("rmse", "mae", "armse", "iterations", "min_eig")


def summary(cfg: ScenarioConfig, report: MetricsReport, timing: bool = False) -> dict:
    out: dict[str, Any] = {
        "seed": cfg.seed,
        "config": config_echo(cfg),
        "armse": {f: {g: report.armse[f][g] for g in report.groups} for f in report.filters()},
        "iterations": {
            f: {
                "mean": float(np.mean(report.iterations[f])),
                "median": float(np.median(report.iterations[f])),
                "max": float(np.max(report.iterations[f])),
            }
            for f in report.filters()
        },
        "gate_rate": dict(report.gate_rate),
        "degraded": dict(report.degraded),
        "min_eig": {f: float(np.min(report.min_eig[f])) for f in report.filters()},
    }
    if timing:
        out["seconds_per_step"] = dict(report.seconds_per_step)
    return out


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def write_report(
    out_dir: Path, cfg: ScenarioConfig, report: MetricsReport, timing: bool = False
) -> list[Path]:
    """One CSV per metric plus ``summary.json``; returns the written paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        _write_rows(out_dir / f"{m}.csv", ["step", "filter", "group", "value"], metric_rows(report, m))
        for m in METRICS
    ]
    paths.append(write_json(out_dir / "summary.json", summary(cfg, report, timing)))
    return paths


def write_sweep(out_dir: Path, cfg: ScenarioConfig, sweep: dict) -> list[Path]:
    """``sweep_L.csv`` with one row per (L, filter) and one ARMSE column per group."""
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = list(cfg.groups)
    rows = []
    for L in sorted(sweep):
        rep = sweep[L]
        for f in rep.filters():
            rows.append([L, f, *(rep.armse[f][g] for g in groups)])
    p = _write_rows(out_dir / "sweep_L.csv", ["L", "filter", *groups], rows)
    js = {
        "seed": cfg.seed,
        "config": config_echo(cfg),
        "armse": {str(L): {f: sweep[L].armse[f] for f in sweep[L].filters()} for L in sorted(sweep)},
    }
    return [p, write_json(out_dir / "sweep_L.json", js)]


def write_trace(out_dir: Path, traces: dict, name: Optional[str] = None) -> list[Path]:
    """Adaptive-coefficient traces as rows ``(step, filter, node, <coefficients>)``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for f, tr in traces.items():
        if tr is None:
            continue
        for t in range(tr.shape[0]):
            for i in range(tr.shape[1]):
                rows.append([t, f, i + 1, *tr[t, i]])
    return [_write_rows(out_dir / (name or "adapt_trace.csv"), ["step", "filter", "node", *TRACE_FIELDS], rows)]
