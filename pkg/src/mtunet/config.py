"""YAML run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Any

import yaml

from .backbone import BackboneConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "MTNET_DATA_ROOT"

# keys of TrainConfig that live in their own sections
_SECTION_KEYS = {"backbone", "postprocess", "data"}
POSTPROCESS_KEYS = {"top_k", "score_threshold", "seg_threshold"}
DATA_KEYS = {"root", "run_dir"}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def default_config() -> dict[str, Any]:
    train = TrainConfig().to_dict()
    backbone = train.pop("backbone")
    post = {k: train.pop(k) for k in POSTPROCESS_KEYS}
    return {
        "backbone": backbone,
        "train": train,
        "postprocess": post,
        "data": {"root": os.environ.get(DATA_ROOT_ENV), "run_dir": "runs/default"},
    }


def parse_config(raw: dict | None) -> tuple[TrainConfig, dict]:
    """Build a TrainConfig from a nested mapping. All problems are reported together."""
    raw = raw or {}
    problems = []
    allowed_sections = {"backbone", "train", "postprocess", "data"}
    for section in raw:
        if section not in allowed_sections:
            problems.append(f"unknown section {section!r}")
    backbone_raw = raw.get("backbone") or {}
    train_raw = dict(raw.get("train") or {})
    post_raw = raw.get("postprocess") or {}
    data_raw = raw.get("data") or {}
    for key in backbone_raw:
        if key not in _fields(BackboneConfig):
            problems.append(f"unknown key backbone.{key}")
    for key in train_raw:
        if key not in _fields(TrainConfig) - _SECTION_KEYS - POSTPROCESS_KEYS:
            problems.append(f"unknown key train.{key}")
    for key in post_raw:
        if key not in POSTPROCESS_KEYS:
            problems.append(f"unknown key postprocess.{key}")
    for key in data_raw:
        if key not in DATA_KEYS:
            problems.append(f"unknown key data.{key}")
    if problems:
        raise ConfigError(problems)
    try:
        backbone = BackboneConfig(**backbone_raw)
        cfg = TrainConfig(backbone=backbone, **train_raw, **post_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError([str(e)]) from e
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    data = {"root": os.environ.get(DATA_ROOT_ENV), **data_raw}
    return cfg, data


def load_config(path: str | Path | None) -> tuple[TrainConfig, dict]:
    if path is None:
        return parse_config({})
    raw = yaml.safe_load(Path(path).read_text())
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(raw)


def dump_config(cfg: TrainConfig, data: dict | None = None) -> str:
    train = cfg.to_dict()
    backbone = train.pop("backbone")
    post = {k: train.pop(k) for k in POSTPROCESS_KEYS}
    return yaml.safe_dump(
        {"backbone": backbone, "train": train, "postprocess": post, "data": data or {}}, sort_keys=False
    )
