"""Report files for evaluation runs: CSV tables, a JSON summary, bar charts.

Float cells are always formatted with six decimals so that two runs with
identical metric values produce byte-identical tables.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluate import EvalReport

METRIC_COLUMNS = ("recall", "precision", "f1", "gmean")


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_folds_table(report: EvalReport, path: str | Path) -> Path:
    """One row per fold: counts plus metrics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "tp", "fp", "tn", "fn", *METRIC_COLUMNS])
        for f in report.per_fold:
            m = f.metric_values.as_dict()
            writer.writerow(
                [f.fold, f.counts.tp, f.counts.fp, f.counts.tn, f.counts.fn]
                + [_fmt(m[k]) for k in METRIC_COLUMNS]
            )
    return path


def write_fold_report(report: EvalReport, fold: int, path: str | Path) -> Path:
    """Single-fold table (same columns as the folds table)."""
    sub = EvalReport(variant=report.variant, label=report.label, threshold=report.threshold)
    sub.per_fold = [f for f in report.per_fold if f.fold == fold]
    return write_folds_table(sub, path)


def write_aggregate_table(reports: Sequence[EvalReport], path: str | Path) -> Path:
    """One row per variant; columns are exactly variant,recall,precision,f1,gmean."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", *METRIC_COLUMNS])
        for report in reports:
            agg = report.aggregate.as_dict()
            writer.writerow([report.label] + [_fmt(agg[k]) for k in METRIC_COLUMNS])
    return path


def write_summary_json(reports: Sequence[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"reports": [r.to_dict() for r in reports]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def render_metric_bars(reports: Sequence[EvalReport], out_dir: str | Path) -> list[Path]:
    """One bar chart per metric, one bar per variant; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [r.label for r in reports]
    written = []
    for metric in METRIC_COLUMNS:
        values = [r.aggregate.as_dict()[metric] for r in reports]
        fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(labels)), 3.2))
        ax.bar(range(len(labels)), values, color="tab:blue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by variant")
        fig.tight_layout()
        out_path = out_dir / f"bar_{metric}.png"
        fig.savefig(out_path, dpi=120)
        plt.close(fig)
        written.append(out_path)
    return written
