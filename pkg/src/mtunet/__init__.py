"""Multi-task UNet for infrared small-target detection and segmentation."""

from .backbone import BackboneConfig, build_backbone, count_parameters
from .model import ModelConfig, ModelMode, MultiTaskUNet, build_model, total_loss

__all__ = [
    "BackboneConfig",
    "ModelConfig",
    "ModelMode",
    "MultiTaskUNet",
    "build_backbone",
    "build_model",
    "count_parameters",
    "total_loss",
]

__version__ = "0.1.0"
