"""Aggregate run records into comparison tables and static charts.

The summary is a pure function of the run-record set: rows are keyed and
sorted by (method, transfer_size, label_budget, seed), so directory
enumeration order never changes the output bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import MissingArtifactError

SUMMARY_COLUMNS = [
    "method",
    "transfer_size",
    "label_budget",
    "seed",
    "mean_dice",
    "mean_hd95",
    "mean_iou",
]


def _read_metrics_means(path: Path) -> dict:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    mean_row = next((r for r in rows if r["class"] == "mean"), None)
    if mean_row is None:
        raise MissingArtifactError(f"no mean row in {path}")

    def num(x):
        return float("nan") if x in ("undefined", "") else float(x)

    return {
        "mean_dice": num(mean_row["dice"]),
        "mean_hd95": num(mean_row["hd95"]),
        "mean_iou": num(mean_row["iou"]),
    }


def collect_runs(runs_root: str | Path) -> list[dict]:
    """Gather evaluated fine-tune runs: record.json + metrics.csv per run dir."""
    runs_root = Path(runs_root)
    if not runs_root.is_dir():
        raise MissingArtifactError(f"runs directory not found: {runs_root}")
    rows = []
    for record_path in runs_root.rglob("record.json"):
        record = json.loads(record_path.read_text())
        if record.get("kind") != "student_finetune":
            continue
        cfg = record.get("config", {})
        metrics_path = record_path.parent / "metrics.csv"
        if not metrics_path.exists():
            continue  # not yet evaluated
        row = {
            "method": cfg.get("method", "scratch"),
            "transfer_size": int(cfg.get("transfer_size", 0)),
            "label_budget": int(cfg.get("labels", 0)),
            "seed": int(record.get("seed", 0)),
        }
        row.update(_read_metrics_means(metrics_path))
        rows.append(row)
    rows.sort(key=lambda r: (r["method"], r["transfer_size"], r["label_budget"], r["seed"]))
    return rows


def write_summary(rows: list[dict], out_dir: str | Path) -> Path:
    if not rows:
        raise MissingArtifactError(
            "no evaluated runs found (run finetune and evaluate first)"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["method"],
                    row["transfer_size"],
                    row["label_budget"],
                    row["seed"],
                    repr(row["mean_dice"]),
                    repr(row["mean_hd95"]),
                    repr(row["mean_iou"]),
                ]
            )
    return path


def _median_by(rows: list[dict], key_fields: tuple[str, ...], value: str) -> dict:
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(row[f] for f in key_fields)
        groups.setdefault(key, []).append(row[value])
    return {k: float(np.median(v)) for k, v in groups.items()}


def render_charts(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Dice-versus-label-budget line chart and a grouped bar chart, PNG + SVG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    medians = _median_by(rows, ("method", "label_budget"), "mean_dice")
    methods = sorted({m for m, _ in medians})
    budgets = sorted({b for _, b in medians})

    outputs = []
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in methods:
        ys = [medians.get((method, b), np.nan) for b in budgets]
        ax.plot(budgets, ys, marker="o", label=method)
    ax.set_xlabel("label budget")
    ax.set_ylabel("median test Dice")
    ax.set_title("Dice vs label budget")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    for ext in ("png", "svg"):
        path = out_dir / f"dice_vs_labels.{ext}"
        fig.savefig(path, metadata={"Date": None} if ext == "svg" else None)
        outputs.append(path)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(methods), 1)
    xs = np.arange(len(budgets), dtype=float)
    for i, method in enumerate(methods):
        ys = [medians.get((method, b), np.nan) for b in budgets]
        ax.bar(xs + i * width, ys, width=width, label=method)
    ax.set_xticks(xs + width * (len(methods) - 1) / 2)
    ax.set_xticklabels([str(b) for b in budgets])
    ax.set_xlabel("label budget")
    ax.set_ylabel("median test Dice")
    ax.set_title("Method comparison")
    ax.legend()
    fig.tight_layout()
    for ext in ("png", "svg"):
        path = out_dir / f"dice_by_method.{ext}"
        fig.savefig(path, metadata={"Date": None} if ext == "svg" else None)
        outputs.append(path)
    plt.close(fig)
    return outputs
