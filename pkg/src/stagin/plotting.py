"""SVG figures for attention summaries (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt and no date so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "stagin"
matplotlib.rcParams["svg.fonttype"] = "none"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_time_attention_matrix(z_time_mat: np.ndarray, path, title: str = "") -> Path:
    """Heatmap of one (T, T) temporal attention matrix."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(z_time_mat, cmap="viridis", aspect="auto", interpolation="nearest")
    ax.set_xlabel("key window")
    ax.set_ylabel("query window")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_time_attention_vector(z_time: np.ndarray, path, indicator: Optional[np.ndarray] = None,
                               threshold: Optional[float] = None, title: str = "") -> Path:
    """Line plot of per-layer temporal attention, optionally shading task windows."""
    z_time = np.atleast_2d(z_time)
    fig, ax = plt.subplots(figsize=(6, 2.5))
    t = np.arange(z_time.shape[1])
    if indicator is not None:
        ax.fill_between(t, 0, 1, where=np.asarray(indicator) > 0, color="0.9", step="mid",
                        transform=ax.get_xaxis_transform(), label="task")
    for k, row in enumerate(z_time):
        ax.plot(t, row, lw=1.0, label=f"layer {k}")
    if threshold is not None:
        ax.axhline(threshold, color="k", ls="--", lw=0.8)
    ax.set_xlabel("window")
    ax.set_ylabel("attention")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, frameon=False, loc="upper right")
    fig.tight_layout()
    return _save(fig, path)


def plot_bars(labels: Sequence[str], values: Sequence[float], path, ylabel: str = "", title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 2.8))
    ax.bar(np.arange(len(values)), values, color="0.35")
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_group_ratios(table, path, group_names=("group 0", "group 1")) -> Path:
    """Grouped bars of per-cluster ratios in the table's sorted order."""
    order = list(table.order)
    r = table.ratios[order]
    x = np.arange(len(order))
    fig, ax = plt.subplots(figsize=(5, 2.8))
    ax.bar(x - 0.2, r[:, 0], width=0.4, label=group_names[0], color="0.6")
    ax.bar(x + 0.2, r[:, 1], width=0.4, label=group_names[1], color="0.2")
    ax.set_xticks(x)
    ax.set_xticklabels([str(j) for j in order])
    ax.set_xlabel("cluster")
    ax.set_ylabel("ratio")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
