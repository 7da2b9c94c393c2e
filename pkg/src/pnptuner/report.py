"""Report serialization: per-region CSV, JSON aggregate summaries, and
per-application bar figures rendered to files next to the tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import metrics
from .errors import DataError
from .tuner import CSV_COLUMNS, EvalReport


def write_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([
                r.tuner, r.application, r.region, r.task_name, f"{r.power_cap:g}",
                r.predicted.label(), r.oracle.label(), r.default.label(),
                repr(r.time_default), repr(r.time_predicted), repr(r.time_oracle),
                repr(r.energy_default), repr(r.energy_predicted), repr(r.energy_oracle),
                repr(r.speedup), repr(r.greenup), repr(r.edp_improvement),
                repr(r.normalized),
            ])


def write_summary_json(report: EvalReport, path: str | Path) -> None:
    doc = {"task": report.task_name, "machine": report.machine_name,
           "tuners": report.aggregates}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        missing = [c for c in CSV_COLUMNS if c not in row]
        if missing:
            raise DataError(f"{path}: missing report columns {missing}")
    return rows


# ---------------------------------------------------------------------------
# Merged summaries over several eval outputs
# ---------------------------------------------------------------------------

def _group(rows: list[dict], keys: tuple[str, ...]) -> dict[tuple, list[dict]]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    return groups


def summarize(rows: list[dict]) -> list[dict]:
    """(task, cap, tuner) summary records: geomeans plus the 0.95/0.8
    oracle-proximity fractions."""
    out = []
    for (task, cap, tuner), grp in sorted(_group(rows, ("task", "power_cap", "tuner")).items()):
        norm = [float(r["normalized"]) for r in grp]
        out.append({
            "task": task, "power_cap": cap, "tuner": tuner, "n_regions": len(grp),
            "geomean_speedup": metrics.geomean([float(r["speedup"]) for r in grp]),
            "geomean_greenup": metrics.geomean([float(r["greenup"]) for r in grp]),
            "geomean_edp_improvement": metrics.geomean(
                [float(r["edp_improvement"]) for r in grp]),
            "geomean_normalized": metrics.geomean(norm),
            "frac_within_095": metrics.frac_within(norm, 0.95),
            "frac_within_080": metrics.frac_within(norm, 0.80),
        })
    return out


def per_application(rows: list[dict]) -> list[dict]:
    out = []
    keys = ("task", "power_cap", "tuner", "application")
    for (task, cap, tuner, app), grp in sorted(_group(rows, keys).items()):
        out.append({
            "task": task, "power_cap": cap, "tuner": tuner, "application": app,
            "n_regions": len(grp),
            "geomean_normalized": metrics.geomean(
                [float(r["normalized"]) for r in grp]),
            "geomean_speedup": metrics.geomean([float(r["speedup"]) for r in grp]),
        })
    return out


def write_records_csv(records: list[dict], path: str | Path) -> None:
    if not records:
        raise DataError("nothing to summarize")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        w.writeheader()
        for rec in records:
            w.writerow(rec)


def render_bar_figures(app_records: list[dict], out_dir: str | Path) -> list[Path]:
    """One grouped bar chart per (task, cap): oracle-normalized metric per
    application, one bar group per tuner."""
    out_dir = Path(out_dir)
    paths = []
    for (task, cap), grp in sorted(_group(app_records, ("task", "power_cap")).items()):
        apps = sorted({r["application"] for r in grp})
        tuners = sorted({r["tuner"] for r in grp})
        by_key = {(r["tuner"], r["application"]): float(r["geomean_normalized"])
                  for r in grp}
        fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(apps)), 3.2))
        width = 0.8 / max(1, len(tuners))
        for ti, tuner in enumerate(tuners):
            xs = [ai + ti * width for ai in range(len(apps))]
            ys = [by_key.get((tuner, app), 0.0) for app in apps]
            ax.bar(xs, ys, width=width, label=tuner)
        ax.set_xticks([ai + 0.4 - width / 2 for ai in range(len(apps))])
        ax.set_xticklabels(apps, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("normalized vs oracle")
        ax.set_ylim(0, 1.05)
        ax.axhline(1.0, color="gray", lw=0.6, ls=":")
        title = task if task.startswith("fastest") else f"{task} (default at {cap} W)"
        ax.set_title(title)
        ax.legend(fontsize=7, ncol=min(3, len(tuners)))
        fig.tight_layout()
        path = out_dir / f"bars_{task.replace('@', '_')}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths
