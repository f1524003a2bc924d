"""Matplotlib figures written to files (non-interactive backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def read_roc_csv(path) -> tuple[list[float], list[float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["fpr"]) for r in rows], [float(r["tpr"]) for r in rows]


def plot_roc_curves(paths, out_path, title: str = "COVID-19 vs rest, held-out folds") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, path in enumerate(paths):
        if Path(path).is_file():
            fpr, tpr = read_roc_csv(path)
            ax.plot(fpr, tpr, lw=1.2, label=f"fold {i}")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="1 - specificity", ylabel="sensitivity", title=title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_fold_accuracy(reports: list[dict], out_path) -> None:
    reports = sorted(reports, key=lambda r: r["fold"])
    folds = [r["fold"] for r in reports]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.4
    ax.bar([f - width / 2 for f in folds], [r["ct_only"]["accuracy"] for r in reports], width,
           label="CT only")
    ax.bar([f + width / 2 for f in folds], [r["fusion"]["accuracy"] for r in reports], width,
           label="CT + clinical")
    ax.set(xlabel="fold", ylabel="accuracy", ylim=(0, 1.05), xticks=folds)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
