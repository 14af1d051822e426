"""Benchmark tables and figures for trade-study results."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from .harness import StudyReport, dumps
from .metrics import MetricsReport

__all__ = ["COLUMNS", "format_cell", "render_report", "render_figures"]

COLUMNS = {
    "precision": "Precision",
    "recall": "Recall",
    "fpr": "FPR",
    "fnr": "FNR",
    "map": "mAP",
    "hota": "HOTA",
    "mota": "MOTA",
    "motp": "MOTP",
    "ftr": "FTR",
    "mtr": "MTR",
    "ade": "ADE",
    "fde": "FDE",
    "sensors_in_range": "Sensors-in-range/frame",
    "dets_per_frame": "Dets/frame",
}

_GROUPS = {
    "perception": ["precision", "recall", "fpr", "fnr", "map"],
    "tracking": ["hota", "mota", "motp", "ftr", "mtr"],
    "prediction": ["ade", "fde"],
    "collaboration": ["sensors_in_range", "dets_per_frame"],
}


def format_cell(mean: float, std: float) -> str:
    if mean is None or math.isnan(mean):
        return "N/A"
    return f"{mean:.2f} +/- {std:.2f}"


def _rows(report: StudyReport) -> list[list[str]]:
    summary = report.summary()
    return [[case] + [format_cell(*summary[case][m]) for m in MetricsReport.names()] for case in report.cases]


def render_report(report: StudyReport, fmt: str = "md") -> str:
    """Cases as rows, metrics as columns.

    ``md`` and ``csv`` show "mean +/- std" to two decimals with "N/A" for
    undefined metrics; ``json`` keeps every per-trial value at full
    precision.
    """
    header = ["Case"] + [COLUMNS[m] for m in MetricsReport.names()]
    if fmt == "json":
        return dumps(report.to_dict())
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(_rows(report))
        return buf.getvalue()
    if fmt == "md":
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join("---" for _ in header) + "|",
        ]
        lines += ["| " + " | ".join(r) + " |" for r in _rows(report)]
        return f"## {report.name}\n\n" + "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}; expected md, csv or json")


def render_figures(report: StudyReport, out_dir: str | Path) -> list[Path]:
    """One bar chart per metric group (mean with std error bars), as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    paths = []
    n_cases = len(report.cases)
    for group, metrics in _GROUPS.items():
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(metrics) * max(1, n_cases) / 2, 3.2))
        width = 0.8 / max(1, n_cases)
        for k, case in enumerate(report.cases):
            means = [summary[case][m][0] for m in metrics]
            stds = [summary[case][m][1] for m in metrics]
            xs = [i + (k - (n_cases - 1) / 2) * width for i in range(len(metrics))]
            ax.bar(xs, [0.0 if math.isnan(v) else v for v in means], width,
                   yerr=[0.0 if math.isnan(v) else v for v in stds], capsize=2, label=case)
        ax.set_xticks(range(len(metrics)))
        ax.set_xticklabels([COLUMNS[m] for m in metrics], fontsize=8)
        ax.set_title(f"{report.name}: {group}")
        ax.axhline(0.0, color="black", linewidth=0.5)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{group}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
