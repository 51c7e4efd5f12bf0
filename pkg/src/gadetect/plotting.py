"""Matplotlib renderers for report figures. Everything draws to files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FOLD_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2")


def _color(i):
    return FOLD_COLORS[i % len(FOLD_COLORS)]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def roc_figure(curves, path, specialist_points: Optional[Sequence] = None, title: str = "") -> Path:
    """One ROC curve per fold, with the specialists' operating point on each fold.

    ``specialist_points`` holds one (fpr, tpr) pair or ``None`` per curve.
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    for i, c in enumerate(curves):
        ax.plot(c.fpr, c.tpr, color=_color(i), lw=1.4, label=f"fold {i + 1} (AUC {c.auc:.3f})")
        if specialist_points is not None and i < len(specialist_points) and specialist_points[i] is not None:
            fpr, tpr = specialist_points[i]
            ax.plot([fpr], [tpr], marker="o", ms=6, color=_color(i), mec="k", ls="none")
    if specialist_points is not None and any(p is not None for p in specialist_points):
        ax.plot([], [], marker="o", color="w", mec="k", ls="none", label="retinal specialists")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8, frameon=False)
    return _save(fig, path)


def history_figure(histories, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, h in enumerate(histories):
        epochs = np.arange(1, len(h.dev_loss) + 1)
        ax.plot(epochs, h.train_loss, color=_color(i), lw=1, ls="--")
        ax.plot(epochs, h.dev_loss, color=_color(i), lw=1.4, label=f"run {i} (best {h.best_epoch})")
        ax.axvline(h.best_epoch, color=_color(i), lw=0.5, alpha=0.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (dashed: train)")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def error_rate_figure(table, path) -> Path:
    rates = [float(r.fn_rate) * 100 if r.fn_rate is not None else np.nan for r in table.rows]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(rates)), rates, color="0.45")
    ax.set_xticks(range(len(rates)))
    ax.set_xticklabels([r.category for r in table.rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("false negative rate (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def saliency_panel(pairs, path, titles: Optional[Sequence[str]] = None) -> Path:
    """Rows of (photo | overlay) composites as produced by ``saliency.overlay``."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 1, figsize=(6, 3 * n), squeeze=False)
    for i, composite in enumerate(pairs):
        ax = axes[i, 0]
        ax.imshow(composite)
        ax.set_axis_off()
        if titles:
            ax.set_title(titles[i], fontsize=9)
    return _save(fig, path)
