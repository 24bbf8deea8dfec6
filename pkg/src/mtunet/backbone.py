"""UNet feature extractor producing a full-resolution 64-channel feature map."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

FEATURE_CHANNELS = 64
UPSAMPLE_KINDS = ("bilinear", "transposed")


class DimensionError(ValueError):
    """Raised when an input's spatial size cannot pass through the encoder."""


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    base_width: int = 64
    in_channels: int = 1
    upsample: str = "bilinear"
    out_channels: int = FEATURE_CHANNELS

    def validate(self) -> None:
        problems = []
        if self.depth <= 0:
            problems.append(f"depth must be positive, got {self.depth}")
        if self.base_width <= 0:
            problems.append(f"base_width must be positive, got {self.base_width}")
        if self.in_channels not in (1, 3):
            problems.append(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.upsample not in UPSAMPLE_KINDS:
            problems.append(f"upsample must be one of {UPSAMPLE_KINDS}, got {self.upsample!r}")
        if self.out_channels != FEATURE_CHANNELS:
            problems.append(f"out_channels is fixed at {FEATURE_CHANNELS}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class Up(nn.Module):
    """Upsample by 2, halve channels, concatenate the skip, fuse."""

    def __init__(self, in_ch: int, out_ch: int, kind: str):
        super().__init__()
        self.kind = kind
        if kind == "transposed":
            self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        else:
            self.up = nn.Conv2d(in_ch, out_ch, kernel_size=1)
        self.conv = DoubleConv(2 * out_ch, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if self.kind == "transposed":
            x = self.up(x)
        else:
            x = self.up(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        return self.conv(torch.cat([skip, x], dim=1))


class UNetBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * 2**i for i in range(config.depth + 1)]
        self.stem = DoubleConv(config.in_channels, widths[0])
        self.down = nn.ModuleList(DoubleConv(widths[i], widths[i + 1]) for i in range(config.depth))
        self.up = nn.ModuleList(
            Up(widths[i + 1], widths[i], config.upsample) for i in reversed(range(config.depth))
        )
        self.project = nn.Conv2d(widths[0], config.out_channels, kernel_size=1)
        self.reset_parameters()

    @property
    def stride(self) -> int:
        return 2**self.config.depth

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise DimensionError(f"expected a (N, C, H, W) batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise DimensionError(
                f"input {h}x{w} is not divisible by {self.stride} (depth {self.config.depth})"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        y = skips.pop()
        for block in self.up:
            y = block(y, skips.pop())
        return self.project(y)


def build_backbone(config: BackboneConfig | None = None) -> UNetBackbone:
    return UNetBackbone(config or BackboneConfig())


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def save_backbone(backbone: UNetBackbone, path: str | Path) -> None:
    torch.save({"config": backbone.config.to_dict(), "state_dict": backbone.state_dict()}, path)


def load_backbone(path: str | Path) -> UNetBackbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    backbone = UNetBackbone(BackboneConfig(**payload["config"]))
    backbone.load_state_dict(payload["state_dict"])
    return backbone
