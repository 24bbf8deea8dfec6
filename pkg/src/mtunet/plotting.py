"""Figures and overlay images written next to the metrics files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .evaluation import PRCurve
from .postprocess import Detection

TARGET_BLUE = (0, 0, 255)
# (lower score bound, RGB) from most to least confident
CONFIDENCE_COLORS = (
    (0.75, (255, 0, 0)),
    (0.5, (255, 165, 0)),
    (0.25, (255, 255, 0)),
    (0.0, (0, 255, 0)),
)

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def confidence_color(score: float) -> tuple[int, int, int]:
    for lower, color in CONFIDENCE_COLORS:
        if score >= lower:
            return color
    return CONFIDENCE_COLORS[-1][1]


def overlay(
    image: np.ndarray,
    mask: np.ndarray | None = None,
    detections: Sequence[Detection] = (),
    min_score: float = 0.25,
) -> Image.Image:
    """Grayscale image, predicted target pixels in blue, boxes coloured by confidence."""
    gray = image if image.ndim == 2 else image.mean(axis=-1)
    g = np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1)
    if mask is not None:
        rgb[np.asarray(mask, dtype=bool)] = TARGET_BLUE
    canvas = Image.fromarray(rgb)
    draw = ImageDraw.Draw(canvas)
    for d in sorted(detections, key=lambda d: d.score):
        if d.score < min_score:
            continue
        # outline the pixels the box covers
        box = [round(d.x1 + 0.5), round(d.y1 + 0.5), round(d.x2 - 0.5), round(d.y2 - 0.5)]
        box[2], box[3] = max(box[2], box[0]), max(box[3], box[1])
        draw.rectangle(box, outline=confidence_color(d.score))
    return canvas


def plot_pr_curves(curves: Sequence[PRCurve], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for c in curves:
            if len(c.recall):
                ax.step(c.recall, c.precision, where="post", label=f"IoU {c.threshold:.2f}  AP {100 * c.ap:.1f}")
        ax.set_xlim(0, 1.01)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.legend(loc="lower left")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_losses(epochs: Sequence[dict], path: str | Path, keys=("L_all", "L_det", "L_seg", "L_k", "L_size")) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        x = [e["epoch"] for e in epochs]
        for k in keys:
            y = [e.get(k) for e in epochs]
            if all(v is not None for v in y) and any(v for v in y):
                ax.plot(x, y, label=k, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean train loss")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_timings(timings: dict[str, Sequence[float]], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        names = list(timings)
        means = [1000 * float(np.mean(timings[n])) for n in names]
        ax.bar(names, means, color="#3288bd")
        for i, m in enumerate(means):
            ax.text(i, m, f"{m:.1f}", ha="center", va="bottom")
        ax.set_ylabel("mean forward time (ms)")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
