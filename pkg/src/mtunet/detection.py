"""Full-resolution keypoint detection head, target encoding and detection losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import FEATURE_CHANNELS
from .data import BoxAnnotation

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
SIZE_WEIGHT = 0.1
CLAMP_EPS = 1e-6
MIN_OVERLAP = 0.7
MIN_SIGMA = 0.6
HEATMAP_PRIOR_BIAS = -2.19  # sigmoid(-2.19) ~= 0.1


@dataclass
class DetectionOutputs:
    heatmap: torch.Tensor  # (B, C, H, W), sigmoid
    size: torch.Tensor  # (B, 2, H, W), (w, h) in pixels
    offset: Optional[torch.Tensor] = None  # (B, 2, H, W)


@dataclass
class DetectionTargets:
    """Encoded ground truth for one image.

    ``centers`` are sub-pixel box centres (x, y); ``keypoints`` their floored
    pixel positions, where the heatmap equals exactly 1.
    """

    heatmap: np.ndarray  # (C, H, W)
    centers: np.ndarray  # (K, 2) float, (x, y)
    sizes: np.ndarray  # (K, 2) float, (w, h)
    classes: np.ndarray  # (K,) int

    @property
    def keypoints(self) -> np.ndarray:
        return np.floor(self.centers).astype(np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return self.centers - self.keypoints


@dataclass
class TargetBatch:
    heatmap: torch.Tensor  # (B, C, H, W)
    index: torch.Tensor  # (K, 3) long: batch, y, x
    sizes: torch.Tensor  # (K, 2)
    offsets: torch.Tensor  # (K, 2)

    @property
    def num_keypoints(self) -> int:
        return int(self.index.shape[0])


@dataclass
class DetLossReport:
    L_k: torch.Tensor
    L_size: torch.Tensor
    L_det: torch.Tensor
    N: int
    L_off: Optional[torch.Tensor] = None


class DetectionHead(nn.Module):
    """Heatmap, size and optional offset branches, each 3x3 conv -> ReLU -> 1x1 conv."""

    def __init__(
        self,
        in_channels: int = FEATURE_CHANNELS,
        num_classes: int = 1,
        head_width: int = 64,
        with_offset: bool = False,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.heatmap = self._branch(in_channels, head_width, num_classes)
        self.size = self._branch(in_channels, head_width, 2)
        self.offset = self._branch(in_channels, head_width, 2) if with_offset else None
        nn.init.constant_(self.heatmap[-1].bias, HEATMAP_PRIOR_BIAS)

    @staticmethod
    def _branch(in_ch: int, width: int, out_ch: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(in_ch, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out_ch, 1),
        )

    def forward(self, feature: torch.Tensor) -> DetectionOutputs:
        if feature.ndim != 4 or feature.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) features, got {tuple(feature.shape)}")
        return DetectionOutputs(
            heatmap=torch.sigmoid(self.heatmap(feature)),
            size=self.size(feature),
            offset=self.offset(feature) if self.offset is not None else None,
        )


# -- target encoding ------------------------------------------------------------


def gaussian_radius(width: float, height: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest corner displacement keeping IoU >= ``min_overlap`` with the true box.

    Minimum over the three displacement cases (both corners inward, both
    outward, one of each), each solved as a quadratic in the radius.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"box size must be positive, got ({width}, {height})")
    if not 0 < min_overlap < 1:
        raise ValueError(f"min_overlap must be in (0, 1), got {min_overlap}")
    w, h, o = float(width), float(height), float(min_overlap)
    s = w + h
    # both corners shifted inward: (w - 2r)(h - 2r) = o w h
    r_in = (s - math.sqrt(s * s - 4 * w * h * (1 - o))) / 4
    # both outward: w h = o (w + 2r)(h + 2r)
    r_out = (-s + math.sqrt(s * s + 4 * w * h * (1 - o) / o)) / 4
    # one in, one out: (w - r)(h - r) (1 + o) = 2 o w h
    r_mixed = (s - math.sqrt(s * s - 4 * w * h * (1 - o) / (1 + o))) / 2
    return max(0.0, min(r_in, r_out, r_mixed))


def adaptive_sigma(
    width: float, height: float, min_overlap: float = MIN_OVERLAP, min_sigma: float = MIN_SIGMA
) -> float:
    return max(gaussian_radius(width, height, min_overlap) / 3.0, min_sigma)


def draw_gaussian(heatmap: np.ndarray, center: tuple[int, int], sigma: float) -> np.ndarray:
    """Max-merge a Gaussian peaked at integer ``center`` = (x, y) into ``heatmap`` in place."""
    h, w = heatmap.shape
    cx, cy = center
    r = int(math.ceil(3 * sigma))
    x0, x1 = max(0, cx - r), min(w, cx + r + 1)
    y0, y1 = max(0, cy - r), min(h, cy + r + 1)
    dy = np.arange(y0, y1)[:, None] - cy
    dx = np.arange(x0, x1)[None, :] - cx
    kernel = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], kernel, out=heatmap[y0:y1, x0:x1])
    return heatmap


def encode_targets(
    boxes: Sequence[BoxAnnotation],
    height: int,
    width: int,
    num_classes: int = 1,
    classes: Sequence[int] | None = None,
    min_overlap: float = MIN_OVERLAP,
    min_sigma: float = MIN_SIGMA,
) -> DetectionTargets:
    heatmap = np.zeros((num_classes, height, width), dtype=np.float64)
    classes = np.zeros(len(boxes), dtype=np.int64) if classes is None else np.asarray(classes, dtype=np.int64)
    centers = np.zeros((len(boxes), 2))
    sizes = np.zeros((len(boxes), 2))
    for k, box in enumerate(boxes):
        if box.x1 < 0 or box.y1 < 0 or box.x2 >= width or box.y2 >= height:
            raise ValueError(f"box {box.corners} lies outside a {height}x{width} image")
        centers[k] = box.center
        sizes[k] = (box.width, box.height)
        sigma = adaptive_sigma(box.width, box.height, min_overlap, min_sigma)
        cx, cy = (int(math.floor(v)) for v in box.center)
        draw_gaussian(heatmap[classes[k]], (cx, cy), sigma)
    return DetectionTargets(heatmap=heatmap.astype(np.float32), centers=centers, sizes=sizes, classes=classes)


def collate_targets(targets: Sequence[DetectionTargets], device: torch.device | str = "cpu") -> TargetBatch:
    heatmap = torch.from_numpy(np.stack([t.heatmap for t in targets])).to(device)
    rows = []
    for b, t in enumerate(targets):
        kp = t.keypoints
        rows.append(np.column_stack([np.full(len(kp), b), kp[:, 1], kp[:, 0]]) if len(kp) else np.zeros((0, 3)))
    index = torch.from_numpy(np.concatenate(rows).astype(np.int64)).to(device)
    sizes = torch.from_numpy(np.concatenate([t.sizes for t in targets]).astype(np.float32)).to(device)
    offsets = torch.from_numpy(np.concatenate([t.offsets for t in targets]).astype(np.float32)).to(device)
    return TargetBatch(heatmap=heatmap, index=index, sizes=sizes, offsets=offsets)


# -- losses -----------------------------------------------------------------------


def focal_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    alpha: float = FOCAL_ALPHA,
    beta: float = FOCAL_BETA,
    num_keypoints: int | None = None,
    eps: float = CLAMP_EPS,
) -> torch.Tensor:
    """Penalty-reduced pixel-wise focal loss, summed and divided by max(N, 1).

    Pixels with ``gt == 1`` are positives. ``num_keypoints`` defaults to
    their count.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    pred = pred.clamp(eps, 1 - eps)
    pos = gt == 1
    if num_keypoints is None:
        num_keypoints = int(pos.sum())
    pos_term = (1 - pred) ** alpha * torch.log(pred)
    neg_term = (1 - gt) ** beta * pred**alpha * torch.log(1 - pred)
    total = torch.where(pos, pos_term, neg_term).sum()
    return -total / max(num_keypoints, 1)


def _gather(maps: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Values of (B, C, H, W) ``maps`` at (K, 3) [b, y, x] positions, as (K, C)."""
    b, y, x = index.unbind(1)
    return maps[b, :, y, x]


def size_loss(size_map: torch.Tensor, index: torch.Tensor, sizes: torch.Tensor) -> torch.Tensor:
    """Mean over keypoints of the summed absolute (w, h) error, read only at centres."""
    if index.shape[0] == 0:
        return size_map.sum() * 0.0
    _, _, h, w = size_map.shape
    b, y, x = index.unbind(1)
    if (y < 0).any() or (y >= h).any() or (x < 0).any() or (x >= w).any() or (b >= size_map.shape[0]).any():
        raise ValueError("keypoint outside the size map")
    return (_gather(size_map, index) - sizes).abs().sum() / index.shape[0]


def detection_loss(
    outputs: DetectionOutputs,
    targets: TargetBatch,
    size_weight: float = SIZE_WEIGHT,
    alpha: float = FOCAL_ALPHA,
    beta: float = FOCAL_BETA,
) -> DetLossReport:
    if outputs.heatmap.shape != targets.heatmap.shape:
        raise ValueError(
            f"heatmap shapes differ: {tuple(outputs.heatmap.shape)} vs {tuple(targets.heatmap.shape)}"
        )
    n = targets.num_keypoints
    l_k = focal_loss(outputs.heatmap, targets.heatmap, alpha, beta, num_keypoints=n)
    l_size = size_loss(outputs.size, targets.index, targets.sizes)
    l_det = l_k + size_weight * l_size
    l_off = None
    if outputs.offset is not None:
        # Trains the optional offset branch; its targets are 0 or 0.5 px.
        l_off = size_loss(outputs.offset, targets.index, targets.offsets)
        l_det = l_det + l_off
    return DetLossReport(L_k=l_k, L_size=l_size, L_det=l_det, N=n, L_off=l_off)
