"""Static report figures. Everything renders off-screen (Agg) to PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .domain import CalibrationReport  # noqa: E402
from .evaluation import CurvePoint  # noqa: E402

CANCER_RGB = (0.85, 0.1, 0.1)
BENIGN_RGB = (0.1, 0.25, 0.85)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def reliability_diagram(report: CalibrationReport, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    centers = [(b.lower + b.upper) / 2 for b in report.bins]
    width = report.bins[0].upper - report.bins[0].lower
    acc = [b.accuracy or 0.0 for b in report.bins]
    conf = [b.confidence if b.count else c for b, c in zip(report.bins, centers)]
    ax.bar(centers, acc, width=width, edgecolor="black", color="tab:blue", label="accuracy")
    ax.bar(centers, np.subtract(conf, acc), bottom=acc, width=width, color="tab:red",
           alpha=0.3, edgecolor="tab:red", label="gap")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="confidence", ylabel="accuracy",
           title=title or f"ECE = {report.ece:.4f}")
    ax.legend(loc="upper left", fontsize=8)
    return _save(fig, path)


def confidence_curves(curves: Mapping[str, Sequence[CurvePoint]], path) -> Path:
    """Core balanced accuracy (top) and retained cores (bottom) against tau, one line per method."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(5, 6), sharex=True)
    for name, points in curves.items():
        tau = [p.tau for p in points]
        top.plot(tau, [p.balanced_accuracy for p in points], marker="o", ms=3, label=name)
        bottom.plot(tau, [p.retained_cores for p in points], marker="o", ms=3, label=name)
    top.set_ylabel("core balanced accuracy")
    bottom.set(xlabel="confidence threshold", ylabel="retained cores")
    top.legend(fontsize=8)
    return _save(fig, path)


def ece_bars(summary: Mapping[str, tuple[float, float]], path, metric: str = "ECE") -> Path:
    names = list(summary)
    means = [summary[n][0] for n in names]
    stds = [summary[n][1] for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names)), 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="tab:gray")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    return _save(fig, path)


def heatmap_rgba(shape, origins, window, prob, confidence, tau) -> np.ndarray:
    """RGBA overlay: red for predicted cancer, blue for benign, alpha 0 below tau.

    Overlapping windows are resolved by the last one drawn, in origin order.
    """
    rgba = np.zeros((*shape, 4))
    h, w = window
    for (r, c), p, conf in zip(origins, prob, confidence):
        if conf < tau:
            continue
        rgba[r:r + h, c:c + w, :3] = CANCER_RGB if p > 0.5 else BENIGN_RGB
        rgba[r:r + h, c:c + w, 3] = 1.0
    return rgba


def heatmap_overlay(image: np.ndarray, rgba: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 6 * image.shape[0] / image.shape[1] + 0.5))
    ax.imshow(image, cmap="gray", aspect="auto")
    ax.imshow(rgba, alpha=0.5 * (rgba[..., 3] > 0), aspect="auto")
    ax.set_title(title)
    ax.axis("off")
    return _save(fig, path)
