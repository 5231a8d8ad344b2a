"""Static figures: objective curves and success-rate bars."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import SIGN_LABELS, SPLIT_LABELS, AttackReport  # noqa: E402


def _smooth(values: Sequence[float], width: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if width <= 1 or len(v) < width:
        return v
    return np.convolve(v, np.ones(width) / width, mode="valid")


def plot_objective_curves(curves: Mapping[str, Sequence[float]], path: str | Path, title: str = "",
                          smooth: int = 20, static_key: str = "static"):
    """Batch objective per iteration, one line per cluster plus the all-data patch (dashed)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, vals in curves.items():
        y = _smooth(vals, smooth)
        x = np.arange(len(y)) + (len(vals) - len(y)) + 1
        style = "--" if name == static_key else "-"
        label = "all data" if name == static_key else f"cluster {name}"
        ax.plot(x, y, style, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_success_bars(report: AttackReport, path: str | Path,
                      signs: Sequence[str] = ("go_straight", "turn", "pedestrian"),
                      splits: Sequence[str] = ("similar", "unseen"),
                      methods: Sequence[str] = ("dynamic", "static", "none")):
    """Grouped bars of success rate per sign, one panel per split; absent cells are left empty."""
    fig, axes = plt.subplots(1, len(splits), figsize=(5 * len(splits), 4), squeeze=False)
    width = 0.8 / len(methods)
    x = np.arange(len(signs))
    for ax, split in zip(axes[0], splits):
        for j, m in enumerate(methods):
            rates = [report.rate(s, split, m) for s in signs]
            ax.bar(x + j * width, [np.nan if r is None else 100 * r for r in rates], width, label=m)
        ax.set_xticks(x + width * (len(methods) - 1) / 2)
        ax.set_xticklabels([SIGN_LABELS.get(s, s) for s in signs])
        ax.set_ylim(0, 100)
        ax.set_ylabel("success rate (%)")
        ax.set_title(SPLIT_LABELS.get(split, split))
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_heatmap_overlay(image, heatmap, path: str | Path, title: str = ""):
    """Image with a translucent heatmap on top."""
    img = image.detach().permute(1, 2, 0).numpy() if hasattr(image, "detach") else np.asarray(image)
    hm = heatmap.detach().numpy() if hasattr(heatmap, "detach") else np.asarray(heatmap)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(img)
    ax.imshow(hm, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    ax.axis("off")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
