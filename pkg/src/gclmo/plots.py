"""Matplotlib figures written next to the delimited outputs they summarize."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRICS, AblationTable  # noqa: E402

LABELS = {"recall_at_k": "Recall@K", "recall_p_at_k": "Recall_p@K", "p_good": "P_good", "p_l": "P_l"}


def figure_path(path) -> str:
    stem = str(path)
    for ext in (".tsv", ".jsonl", ".json"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
            break
    return stem + ".png"


def plot_ablation(table: AblationTable, path) -> str:
    """One panel per metric: per-variant mean with a one-stdev bar and the
    individual seeds as dots."""
    summary = table.summary()
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.6))
    x = np.arange(len(table.variants))
    for ax, metric in zip(axes, METRICS):
        means = [summary[v][metric][0] for v in table.variants]
        sds = [summary[v][metric][1] for v in table.variants]
        ax.bar(x, means, yerr=sds, color="#8da0cb", capsize=3)
        for i, v in enumerate(table.variants):
            vals = table.values(v, metric)
            ax.plot(np.full(len(vals), i), vals, "k.", markersize=3)
        ax.set_xticks(x, table.variants, rotation=45, ha="right", fontsize=8)
        ax.set_title(LABELS[metric])
        lo = min(m - s for m, s in zip(means, sds))
        hi = max(m + s for m, s in zip(means, sds))
        pad = max(0.02, 0.1 * (hi - lo))
        ax.set_ylim(max(0.0, lo - pad), min(1.0, hi + pad))
    fig.tight_layout()
    out = figure_path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_training(history: list[dict], path) -> str:
    """Per-objective and total loss by epoch."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    epochs = [h["epoch"] for h in history]
    for key in sorted(k for k in history[0] if k.startswith("loss_")):
        ax.plot(epochs, [h[key] for h in history], marker="o", label=key[5:])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per instance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = figure_path(path)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
