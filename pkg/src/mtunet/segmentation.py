"""Pyramid-pooling segmentation head and weighted smooth dice loss."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .backbone import FEATURE_CHANNELS

BIN_SIZES = (1, 2, 3, 6)
TARGET_WEIGHT = 10.0
BACKGROUND_WEIGHT = 0.1
SMOOTH = 1.0
THRESHOLD = 0.5


@dataclass
class SegLossReport:
    dice_target: torch.Tensor
    dice_background: torch.Tensor
    L_seg: torch.Tensor
    target_weight: float = TARGET_WEIGHT
    background_weight: float = BACKGROUND_WEIGHT
    smooth: float = SMOOTH


class PyramidPooling(nn.Module):
    def __init__(self, in_channels: int = FEATURE_CHANNELS, reduced: int = 16, bins=BIN_SIZES):
        super().__init__()
        self.bins = tuple(bins)
        self.reduce = nn.ModuleList(nn.Conv2d(in_channels, reduced, 1) for _ in self.bins)

    @property
    def out_channels(self) -> int:
        return self.reduce[0].in_channels + len(self.bins) * self.reduce[0].out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        pyramid = [x]
        for size, conv in zip(self.bins, self.reduce):
            pooled = conv(F.adaptive_avg_pool2d(x, size))
            pyramid.append(F.interpolate(pooled, size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(pyramid, dim=1)


class SegmentationHead(nn.Module):
    """Pyramid pooling, 3x3 fusion block and a single sigmoid "target" channel.

    The background class is the complement ``1 - probs``.
    """

    def __init__(self, in_channels: int = FEATURE_CHANNELS, reduced: int = 16, fused: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.ppm = PyramidPooling(in_channels, reduced)
        self.fuse = nn.Sequential(
            nn.Conv2d(self.ppm.out_channels, fused, 3, padding=1, bias=False),
            nn.BatchNorm2d(fused),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(fused, 1, 1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.ndim != 4 or feature.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) features, got {tuple(feature.shape)}")
        if min(feature.shape[-2:]) < max(self.ppm.bins):
            raise ValueError(
                f"feature map {tuple(feature.shape[-2:])} is smaller than the {max(self.ppm.bins)}x{max(self.ppm.bins)} bin"
            )
        return torch.sigmoid(self.classifier(self.fuse(self.ppm(feature))))


def dice_smooth(pred: torch.Tensor, true: torch.Tensor, smooth: float = SMOOTH) -> torch.Tensor:
    if pred.shape != true.shape:
        raise ValueError(f"shapes differ: {tuple(pred.shape)} vs {tuple(true.shape)}")
    true = true.to(pred.dtype)
    return (2 * (true * pred).sum() + smooth) / ((true * true + pred * pred).sum() + smooth)


def segmentation_loss(
    probs: torch.Tensor,
    mask: torch.Tensor,
    target_weight: float = TARGET_WEIGHT,
    background_weight: float = BACKGROUND_WEIGHT,
    smooth: float = SMOOTH,
) -> SegLossReport:
    mask = mask.to(probs.dtype)
    d_t = dice_smooth(probs, mask, smooth)
    d_b = dice_smooth(1 - probs, 1 - mask, smooth)
    loss = target_weight * (1 - d_t) + background_weight * (1 - d_b)
    return SegLossReport(d_t, d_b, loss, target_weight, background_weight, smooth)


def binarize(probs: torch.Tensor | np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    return np.asarray(probs) > threshold


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)
