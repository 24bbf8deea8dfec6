"""Shared-backbone multi-task model, the aggregated objective and checkpoints."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BackboneConfig, UNetBackbone, count_parameters
from .detection import DetectionHead, DetectionOutputs, DetLossReport
from .segmentation import SegLossReport, SegmentationHead

DET_WEIGHT = 3.0
SEG_WEIGHT = 1.0
CHECKPOINT_FORMAT = "mtunet-checkpoint/1"


class ModeError(RuntimeError):
    """Requested an output or metric the model's mode does not produce."""


class ConfigMismatchError(ValueError):
    pass


class ModelMode(str, enum.Enum):
    SEG_ONLY = "seg_only"
    DET_ONLY = "det_only"
    MULTITASK = "multitask"

    @property
    def has_det(self) -> bool:
        return self is not ModelMode.SEG_ONLY

    @property
    def has_seg(self) -> bool:
        return self is not ModelMode.DET_ONLY

    @classmethod
    def parse(cls, value: "str | ModelMode") -> "ModelMode":
        aliases = {"seg": cls.SEG_ONLY, "det": cls.DET_ONLY, "mt": cls.MULTITASK}
        if isinstance(value, cls):
            return value
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class ModelConfig:
    mode: ModelMode = ModelMode.MULTITASK
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    with_offset: bool = True
    num_classes: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            mode=ModelMode.parse(d["mode"]),
            backbone=BackboneConfig(**d["backbone"]),
            with_offset=d.get("with_offset", True),
            num_classes=d.get("num_classes", 1),
        )


@dataclass
class ModelOutputs:
    mode: ModelMode
    _det: Optional[DetectionOutputs] = None
    _seg: Optional[torch.Tensor] = None

    @property
    def det(self) -> DetectionOutputs:
        if self._det is None:
            raise ModeError(f"{self.mode.value} model has no detection output")
        return self._det

    @property
    def seg(self) -> torch.Tensor:
        if self._seg is None:
            raise ModeError(f"{self.mode.value} model has no segmentation output")
        return self._seg


@dataclass
class TotalLossReport:
    L_det: torch.Tensor
    L_seg: torch.Tensor
    L_all: torch.Tensor
    det_weight: float = DET_WEIGHT
    seg_weight: float = SEG_WEIGHT


class MultiTaskUNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.backbone = UNetBackbone(config.backbone)
        self.det_head = (
            DetectionHead(num_classes=config.num_classes, with_offset=config.with_offset)
            if config.mode.has_det
            else None
        )
        self.seg_head = SegmentationHead() if config.mode.has_seg else None

    @property
    def mode(self) -> ModelMode:
        return self.config.mode

    def forward(self, image: torch.Tensor) -> ModelOutputs:
        feature = self.backbone(image)
        return ModelOutputs(
            mode=self.mode,
            _det=self.det_head(feature) if self.det_head is not None else None,
            _seg=self.seg_head(feature) if self.seg_head is not None else None,
        )

    def num_parameters(self) -> int:
        return count_parameters(self)


def build_model(mode: ModelMode | str = ModelMode.MULTITASK, backbone: BackboneConfig | None = None, **kwargs) -> MultiTaskUNet:
    return MultiTaskUNet(ModelConfig(mode=ModelMode.parse(mode), backbone=backbone or BackboneConfig(), **kwargs))


def total_loss(
    det: DetLossReport | None,
    seg: SegLossReport | None,
    det_weight: float = DET_WEIGHT,
    seg_weight: float = SEG_WEIGHT,
) -> TotalLossReport:
    if det is None and seg is None:
        raise ValueError("total_loss needs at least one task loss")
    if det is not None and seg is not None:
        l_det, l_seg = det.L_det, seg.L_seg
        l_all = det_weight * l_det + seg_weight * l_seg
    elif det is not None:
        l_det = det.L_det
        l_seg = torch.zeros_like(l_det)
        l_all = det_weight * l_det
    else:
        l_seg = seg.L_seg
        l_det = torch.zeros_like(l_seg)
        l_all = seg_weight * l_seg
    return TotalLossReport(l_det, l_seg, l_all, det_weight, seg_weight)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(model: MultiTaskUNet, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    return payload


def load_checkpoint(path: str | Path) -> MultiTaskUNet:
    payload = read_checkpoint(path)
    model = MultiTaskUNet(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model


def backbone_state(payload: dict) -> tuple[BackboneConfig, dict]:
    prefix = "backbone."
    state = {k[len(prefix) :]: v for k, v in payload["state_dict"].items() if k.startswith(prefix)}
    return BackboneConfig(**payload["config"]["backbone"]), state


def load_pretrained_backbone(model: MultiTaskUNet, checkpoint: str | Path | dict) -> MultiTaskUNet:
    """Copy backbone weights from another run's checkpoint; heads keep their fresh init.

    Nothing is frozen.
    """
    payload = read_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    source_cfg, state = backbone_state(payload)
    target_cfg = model.config.backbone
    diffs = [
        f"{name}: checkpoint {getattr(source_cfg, name)} vs model {getattr(target_cfg, name)}"
        for name in ("depth", "base_width", "in_channels", "upsample", "out_channels")
        if getattr(source_cfg, name) != getattr(target_cfg, name)
    ]
    if diffs:
        raise ConfigMismatchError("backbone config mismatch: " + "; ".join(diffs))
    model.backbone.load_state_dict(state)
    return model
