"""Report figures: training loss curve, attention heatmap, metric bars.

Figures are drawn on standalone Agg canvases so nothing touches pyplot's
global state and no display is needed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# fixed metadata keeps PNG bytes independent of the matplotlib version
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    return path


def plot_loss_curve(history, path, title: str = "training loss") -> Path:
    """``history`` is a sequence of epoch records (``.epoch``, ``.loss``, ``.split``)."""
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    for split in dict.fromkeys(r.split for r in history):
        recs = [r for r in history if r.split == split]
        ax.plot([r.epoch for r in recs], [r.loss for r in recs], marker="o", markersize=2.5, label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss" if all(r.split == "train" for r in history) else "value")
    ax.set_title(title)
    if history and min(r.loss for r in history) > 0:
        ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    return _save(fig, path)


def plot_attention(weights, words, path, title: str = "temporal attention") -> Path:
    """Heatmap of attention weights: one row per generated word, one column per feature row."""
    mat = np.asarray(weights, dtype=float)
    if mat.ndim != 2:
        raise ValueError(f"attention weights must be 2-D, got shape {mat.shape}")
    fig = Figure(figsize=(max(3.0, 0.45 * mat.shape[1] + 1.8), max(2.0, 0.3 * mat.shape[0] + 1.2)))
    ax = fig.add_subplot()
    im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0.0, vmax=max(float(mat.max()), 1e-12))
    ax.set_yticks(range(mat.shape[0]), labels=list(words))
    ax.set_xticks(range(mat.shape[1]))
    ax.set_xlabel("feature row")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.05)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(reports: dict, path, title: str = "caption metrics (%)") -> Path:
    """Grouped bars, one group per metric column and one bar per named report."""
    names = list(reports)
    if not names:
        raise ValueError("no reports to plot")
    columns = next(iter(reports.values())).COLUMNS
    x = np.arange(len(columns))
    width = 0.8 / len(names)
    fig = Figure(figsize=(7, 3.4))
    ax = fig.add_subplot()
    for k, name in enumerate(names):
        vals = list(reports[name].percent().values())
        ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, labels=list(columns))
    ax.set_ylabel("score")
    ax.set_ylim(0, 105)
    ax.set_title(title)
    ax.legend(frameon=False, fontsize="small", loc="upper center", bbox_to_anchor=(0.5, -0.1), ncol=len(names))
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    return _save(fig, path)
