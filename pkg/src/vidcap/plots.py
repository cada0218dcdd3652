"""Figure rendering for the reporting paths.

Every command that writes delimited output (training log, metric report,
region catalog) can render a companion PNG next to it. Uses the Agg
backend so the CLI works headless.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .encoder import RegionCatalog
from .metrics import MetricReport


def save_loss_curve(log_path: str | Path, out_path: str | Path) -> None:
    """Loss and learning-rate curves from a JSONL training log."""
    steps, losses, lrs = [], [], []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            steps.append(record["step"])
            losses.append(record["loss"])
            lrs.append(record["lr"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.2, color="tab:blue", label="loss")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("masked-token loss")
    ax.set_yscale("log")
    twin = ax.twinx()
    twin.plot(steps, lrs, lw=0.8, color="tab:orange", alpha=0.7, label="lr")
    twin.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_region_histogram(catalog: RegionCatalog, out_path: str | Path) -> None:
    """Histogram of region areas in feature cells."""
    areas = [catalog.cell_area(r) for r in catalog.regions]
    fig, ax = plt.subplots(figsize=(6, 4))
    if areas:
        bins = min(20, len(set(areas)))
        ax.hist(areas, bins=bins, color="tab:green", edgecolor="black")
    ax.set_xlabel("region area (feature cells)")
    ax.set_ylabel("count")
    ax.set_title(
        f"{len(catalog)} regions on a {catalog.grid_rows}x{catalog.grid_cols} grid "
        f"(cell {catalog.cell}, threshold {catalog.area_threshold})"
    )
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_metric_bars(report: MetricReport, out_path: str | Path) -> None:
    """Bar chart of the four scores in percentage presentation."""
    labels = ["BLEU-4", "METEOR", "ROUGE-L", "CIDEr"]
    values = [100 * v for v in report.scores().values()]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color="tab:purple")
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("score (x100)")
    ax.set_title(f"{report.num_videos} videos, {report.num_references} references")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
