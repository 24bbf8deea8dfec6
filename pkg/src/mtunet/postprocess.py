"""Heatmap peak extraction and box assembly.

Boxes are returned in the heatmap frame, where pixel ``i`` spans
``[i - 0.5, i + 0.5]``; an image of width W covers ``[-0.5, W - 0.5]``.
COCO export shifts by half a pixel into the ``[x_min, y_min, w, h]`` edge
convention used by the annotation files.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch
from scipy import ndimage

from .detection import DetectionOutputs

TOP_K = 100
SCORE_THRESHOLD = 0.25
MIN_BOX_SIZE = 1.0


class Peak(NamedTuple):
    x: int
    y: int
    cls: int
    score: float


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    cls: int = 0

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def size(self) -> tuple[float, float]:
        return (self.x2 - self.x1, self.y2 - self.y1)

    def coco_bbox(self) -> list[float]:
        return [self.x1 + 0.5, self.y1 + 0.5, self.x2 - self.x1, self.y2 - self.y1]


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def _plateau_peaks(channel: np.ndarray) -> np.ndarray:
    """(y, x) of 3x3 local maxima, one per plateau (its smallest (y, x))."""
    local_max = ndimage.maximum_filter(channel, size=3, mode="constant", cval=-np.inf)
    candidates = channel >= local_max
    labels, n = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    # first raster-order index of each label
    values, first = np.unique(labels.ravel(), return_index=True)
    first = first[values > 0]
    return np.column_stack(np.unravel_index(first, channel.shape))


def extract_peaks(heatmap, top_k: int = TOP_K, score_threshold: float = SCORE_THRESHOLD) -> list[Peak]:
    """Peaks of a (C, H, W) heatmap, highest score first, at most ``top_k``."""
    if top_k <= 0:
        raise ValueError(f"top_k must be positive, got {top_k}")
    heatmap = _as_numpy(heatmap)
    if heatmap.ndim == 2:
        heatmap = heatmap[None]
    peaks = []
    for c, channel in enumerate(heatmap):
        for y, x in _plateau_peaks(channel):
            score = float(channel[y, x])
            if score >= score_threshold:
                peaks.append(Peak(int(x), int(y), c, score))
    peaks.sort(key=lambda p: (-p.score, p.cls, p.y, p.x))
    return peaks[:top_k]


def assemble_boxes(
    peaks: Iterable[Peak],
    size_map,
    image_dims: tuple[int, int],
    offset_map=None,
) -> list[Detection]:
    """Boxes centred on each peak (plus offset, when given) with the predicted size.

    Sizes are clamped to at least one pixel and boxes clipped to the image.
    """
    size_map = _as_numpy(size_map)
    offset_map = _as_numpy(offset_map) if offset_map is not None else None
    h, w = image_dims
    out = []
    for p in peaks:
        bw, bh = (max(float(v), MIN_BOX_SIZE) for v in size_map[:, p.y, p.x])
        cx, cy = float(p.x), float(p.y)
        if offset_map is not None:
            cx += float(offset_map[0, p.y, p.x])
            cy += float(offset_map[1, p.y, p.x])
        x1 = min(max(cx - bw / 2, -0.5), w - 0.5)
        y1 = min(max(cy - bh / 2, -0.5), h - 0.5)
        x2 = min(max(cx + bw / 2, -0.5), w - 0.5)
        y2 = min(max(cy + bh / 2, -0.5), h - 0.5)
        out.append(Detection(x1, y1, x2, y2, p.score, p.cls))
    out.sort(key=lambda d: -d.score)
    return out


def decode(
    outputs: DetectionOutputs,
    top_k: int = TOP_K,
    score_threshold: float = SCORE_THRESHOLD,
    use_offset: bool = True,
) -> list[list[Detection]]:
    """Per-image detections from a batch of head outputs."""
    heat = _as_numpy(outputs.heatmap)
    size = _as_numpy(outputs.size)
    offset = _as_numpy(outputs.offset) if (use_offset and outputs.offset is not None) else None
    results = []
    for b in range(heat.shape[0]):
        peaks = extract_peaks(heat[b], top_k, score_threshold)
        results.append(
            assemble_boxes(peaks, size[b], heat.shape[-2:], offset[b] if offset is not None else None)
        )
    return results


def to_coco_results(results: Sequence[Sequence[Detection]], image_ids: Sequence[int], category_id: int = 1) -> list[dict]:
    return [
        {"image_id": int(image_id), "category_id": category_id, "bbox": det.coco_bbox(), "score": float(det.score)}
        for image_id, dets in zip(image_ids, results)
        for det in dets
    ]
