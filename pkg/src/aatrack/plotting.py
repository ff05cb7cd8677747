"""Static report figures (PNG).

Figures are built on the object-oriented Agg API so no global pyplot state
is touched, and PNG metadata is pinned so identical inputs give identical
bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

PNG_METADATA = {"Software": None}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=PNG_METADATA)
    tmp.replace(path)
    return path


def plot_paired_comparison(values: Mapping[str, Sequence[float]], path, metric: str = "HD (mm)",
                           p_values: Mapping[str, float] | None = None, reference: str | None = None) -> Path:
    """Per-cine paired values for each method, one line per cine across methods."""
    names = list(values)
    data = np.array([np.asarray(values[k], dtype=float) for k in names])
    fig = Figure(figsize=(1.8 + 1.4 * len(names), 4.0))
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(names))
    for j in range(data.shape[1]):
        ax.plot(x, data[:, j], color="0.7", linewidth=0.8, zorder=1)
    for i in range(len(names)):
        ax.scatter(np.full(data.shape[1], x[i]), data[i], s=14, color=COLORS[i % len(COLORS)], zorder=2)
        ax.hlines(np.median(data[i]), x[i] - 0.25, x[i] + 0.25, color="k", linewidth=2, zorder=3)
    labels = []
    for k in names:
        if p_values and k in p_values:
            labels.append(f"{k}\np={p_values[k]:.3g}")
        else:
            labels.append(k)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(metric)
    title = "per-cine paired comparison"
    if reference:
        title += f" (p vs {reference})"
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_tracking_overlay(frames: Sequence[np.ndarray], truth: Sequence[np.ndarray] | None,
                          tracked: Mapping[str, Sequence[np.ndarray]], path,
                          indices: Sequence[int] | None = None) -> Path:
    """Frames with ground-truth and tracked mask contours."""
    n = len(frames)
    idx = list(indices) if indices is not None else sorted({0, n // 3, (2 * n) // 3, n - 1})
    fig = Figure(figsize=(2.6 * len(idx), 2.9))
    for col, k in enumerate(idx):
        ax = fig.add_subplot(1, len(idx), col + 1)
        ax.imshow(frames[k], cmap="gray", interpolation="nearest")
        if truth is not None:
            ax.contour(np.asarray(truth[k], float), [0.5], colors="lime", linewidths=1.0)
        for i, (name, masks) in enumerate(tracked.items()):
            ax.contour(np.asarray(masks[k], float), [0.5], colors=COLORS[i % len(COLORS)], linewidths=0.8)
        ax.set_title(f"frame {k}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    legend = (["truth (green)"] if truth is not None else []) + [
        f"{name} ({COLORS[i % len(COLORS)]})" for i, name in enumerate(tracked)]
    fig.suptitle(", ".join(legend), fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curve(history: Sequence[Mapping[str, float]], path, keys: Sequence[str] | None = None,
                        title: str = "training") -> Path:
    """Loss (and component terms) against iteration, log-scaled when positive."""
    fig = Figure(figsize=(5.0, 3.2))
    ax = fig.add_subplot(1, 1, 1)
    if history:
        it = np.array([h["iteration"] for h in history], dtype=float)
        keys = list(keys) if keys is not None else [k for k in history[0] if k not in ("iteration", "epoch", "level")]
        for i, k in enumerate(keys):
            ax.plot(it, [h.get(k, np.nan) for h in history], label=k, color=COLORS[i % len(COLORS)], linewidth=0.9)
        vals = np.array([[h.get(k, np.nan) for k in keys] for h in history], dtype=float)
        if np.all(vals[np.isfinite(vals)] > 0):
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    ax.set_xlabel("iteration")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
