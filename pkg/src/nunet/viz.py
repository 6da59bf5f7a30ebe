"""Static figure and overlay generation (PNG files, no interactive UI)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .metrics import METRIC_NAMES


def boundary(mask: np.ndarray) -> np.ndarray:
    """4-neighbor boundary of a binary mask."""
    m = np.asarray(mask).astype(bool)
    eroded = m.copy()
    eroded[1:, :] &= m[:-1, :]
    eroded[:-1, :] &= m[1:, :]
    eroded[:, 1:] &= m[:, :-1]
    eroded[:, :-1] &= m[:, 1:]
    return m & ~eroded


def overlay_contours(image: np.ndarray, pred_bin: np.ndarray,
                     gt_bin: np.ndarray) -> np.ndarray:
    """Draw prediction (red) and ground-truth (green) contours on an image.

    Pixels where the two contours coincide render yellow. `image` is a
    (H, W) array in [0, 1]; the result is (H, W, 3) uint8.
    """
    base = (np.clip(np.asarray(image), 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=-1)
    gt_edge = boundary(gt_bin)
    pred_edge = boundary(pred_bin)
    rgb[gt_edge] = (0, 255, 0)
    rgb[pred_edge] = (255, 0, 0)
    rgb[gt_edge & pred_edge] = (255, 255, 0)
    return rgb


def save_overlay(path: str | Path, image: np.ndarray, pred_bin: np.ndarray,
                 gt_bin: np.ndarray) -> None:
    rgb = overlay_contours(image, pred_bin, gt_bin)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)


def failure_rate_chart(rates: dict[str, float], path: str | Path,
                       title: str = "segmentation failure rates") -> None:
    """Bar chart of per-method failure rates (fractions in [0, 1])."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    names = list(rates)
    values = [100 * rates[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.2))
    bars = ax.bar(names, values, color="#4878a8")
    for bar, value in zip(bars, values):
        ax.annotate(f"{value:.2f}%", (bar.get_x() + bar.get_width() / 2, value),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("failure rate (%)")
    ax.set_title(title)
    ax.set_ylim(0, max(values + [1.0]) * 1.25)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def depth_sweep_plot(depths: list[int], series: dict[str, list[float]],
                     path: str | Path) -> None:
    """Metric-vs-depth curves (one line per metric)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in METRIC_NAMES:
        if name in series:
            ax.plot(depths, [100 * v for v in series[name]], marker="o", label=name)
    ax.set_xlabel("backbone depth")
    ax.set_ylabel("metric (%)")
    ax.set_xticks(depths)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
