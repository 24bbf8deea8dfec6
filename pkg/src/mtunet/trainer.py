"""Training loop, validation and checkpoint evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data as D
from .backbone import BackboneConfig
from .detection import collate_targets, detection_loss, encode_targets
from .evaluation import ConfusionCounts, ImageDetections, MetricsReport, evaluate_detections
from .model import (
    ModeError,
    ModelConfig,
    ModelMode,
    MultiTaskUNet,
    load_checkpoint,
    load_pretrained_backbone,
    read_checkpoint,
    save_checkpoint,
    total_loss,
)
from .postprocess import Detection, decode
from .segmentation import THRESHOLD, binarize, segmentation_loss

log = logging.getLogger(__name__)

EVAL_SCORE_THRESHOLD = 0.0


class TrainingError(RuntimeError):
    pass


class SplitMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: ModelMode = ModelMode.MULTITASK
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    with_offset: bool = True
    epochs: int = 200
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.05
    gamma: float = 0.98
    batch_size: int = 4
    image_size: tuple[int, int] = (320, 320)
    augment: bool = True
    det_weight: float = 3.0
    seg_weight: float = 1.0
    val_every: int = 5
    seed: int = 0
    pretrained: str | None = None
    top_k: int = 100
    score_threshold: float = 0.25
    seg_threshold: float = THRESHOLD

    def __post_init__(self):
        self.mode = ModelMode.parse(self.mode)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.image_size = tuple(self.image_size)

    def problems(self) -> list[str]:
        out = []
        for name in ("epochs", "lr", "batch_size", "val_every", "top_k"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "det_weight", "seg_weight"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.gamma <= 1:
            out.append(f"gamma must be in (0, 1], got {self.gamma}")
        stride = 2**self.backbone.depth
        if any(s <= 0 or s % stride for s in self.image_size):
            out.append(f"image_size {self.image_size} must be positive multiples of {stride}")
        try:
            self.backbone.validate()
        except ValueError as e:
            out.append(str(e))
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))

    def model_config(self) -> ModelConfig:
        return ModelConfig(mode=self.mode, backbone=self.backbone, with_offset=self.with_offset)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class RunRecord:
    config: dict
    fingerprint: str
    epochs: list[dict] = field(default_factory=list)
    validation: dict[int, dict] = field(default_factory=dict)
    checkpoints: dict[int, str] = field(default_factory=dict)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    selection_metric: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# -- batching ---------------------------------------------------------------------


def image_tensor(samples: Sequence[D.Sample], in_channels: int = 1) -> torch.Tensor:
    arrays = []
    for s in samples:
        img = s.image
        if img.ndim == 2:
            img = img[None]
        else:
            img = np.moveaxis(img, -1, 0)
        if img.shape[0] == 1 and in_channels == 3:
            img = np.repeat(img, 3, axis=0)
        elif img.shape[0] == 3 and in_channels == 1:
            img = img.mean(axis=0, keepdims=True)
        arrays.append(img)
    return torch.from_numpy(np.stack(arrays).astype(np.float32))


def prepare(sample: D.Sample, size: tuple[int, int], rng: np.random.Generator | None) -> D.Sample:
    if rng is not None:
        sample = D.augment(sample, rng)
    return D.resize(sample, size)


def batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch-norm cannot normalise a single 1x1 bottleneck sample
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def compute_losses(model: MultiTaskUNet, samples: Sequence[D.Sample], config: TrainConfig):
    """Forward one prepared batch; returns (TotalLossReport, det report | None, seg report | None)."""
    x = image_tensor(samples, config.backbone.in_channels)
    out = model(x)
    det_report = seg_report = None
    if model.mode.has_det:
        h, w = samples[0].shape
        targets = collate_targets([encode_targets(s.boxes, h, w) for s in samples])
        det_report = detection_loss(out.det, targets)
    if model.mode.has_seg:
        mask = torch.from_numpy(np.stack([s.mask for s in samples])[:, None].astype(np.float32))
        seg_report = segmentation_loss(out.seg, mask)
    return total_loss(det_report, seg_report, config.det_weight, config.seg_weight), det_report, seg_report


def make_optimizer(model: MultiTaskUNet, config: TrainConfig) -> torch.optim.SGD:
    decay = [p for p in model.parameters() if p.ndim > 1]
    no_decay = [p for p in model.parameters() if p.ndim <= 1]
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.lr,
        momentum=config.momentum,
    )


# -- inference & evaluation -----------------------------------------------------


@dataclass
class Prediction:
    sample: D.Sample
    detections: list[Detection] | None
    seg_probs: np.ndarray | None


@torch.no_grad()
def predict(
    model: MultiTaskUNet,
    samples: Sequence[D.Sample],
    size: tuple[int, int],
    top_k: int = 100,
    score_threshold: float = EVAL_SCORE_THRESHOLD,
    batch_size: int = 4,
) -> list[Prediction]:
    was_training = model.training
    model.eval()
    preds = []
    try:
        for i in range(0, len(samples), batch_size):
            chunk = [D.resize(s, size) for s in samples[i : i + batch_size]]
            out = model(image_tensor(chunk, model.config.backbone.in_channels))
            dets = decode(out.det, top_k, score_threshold) if model.mode.has_det else [None] * len(chunk)
            segs = out.seg[:, 0].numpy() if model.mode.has_seg else [None] * len(chunk)
            preds += [Prediction(s, d, p) for s, d, p in zip(chunk, dets, segs)]
    finally:
        model.train(was_training)
    return preds


def metrics_from_predictions(
    preds: Sequence[Prediction], tasks: Sequence[str], seg_threshold: float = THRESHOLD, **diag
) -> MetricsReport:
    det_metrics = seg_counts = None
    if "det" in tasks:
        dets = [ImageDetections.from_pairs([(d.xyxy, d.score) for d in p.detections]) for p in preds]
        gts = [np.asarray([b.xyxy for b in p.sample.boxes], dtype=float).reshape(-1, 4) for p in preds]
        det_metrics = evaluate_detections(dets, gts)
    if "seg" in tasks:
        seg_counts = ConfusionCounts()
        for p in preds:
            seg_counts.update(binarize(p.seg_probs, seg_threshold), p.sample.mask)
    return MetricsReport.build(det_metrics, seg_counts, num_images=len(preds), **diag)


def mode_tasks(mode: ModelMode) -> tuple[str, ...]:
    return tuple(t for t, ok in (("det", mode.has_det), ("seg", mode.has_seg)) if ok)


def evaluate_model(model: MultiTaskUNet, samples: Sequence[D.Sample], config: TrainConfig, tasks=None) -> MetricsReport:
    tasks = mode_tasks(model.mode) if tasks is None else tuple(tasks)
    check_tasks(model.mode, tasks)
    preds = predict(model, samples, config.image_size, config.top_k)
    return metrics_from_predictions(preds, tasks, config.seg_threshold)


def check_tasks(mode: ModelMode, tasks: Sequence[str]) -> None:
    for t in tasks:
        if t not in ("det", "seg"):
            raise ValueError(f"unknown task {t!r}")
        if t == "det" and not mode.has_det:
            raise ModeError(f"{mode.value} checkpoint has no detection head; cannot report box AP")
        if t == "seg" and not mode.has_seg:
            raise ModeError(f"{mode.value} checkpoint has no segmentation head; cannot report IoU")


# -- training ---------------------------------------------------------------------


def _selection_metric(mode: ModelMode) -> str:
    return "miou" if mode is ModelMode.SEG_ONLY else "AP50"


def _split_hashes(dataset_root: str | Path | None) -> dict[str, str]:
    if dataset_root is None:
        return {}
    out = {}
    for split in ("train", "val"):
        p = Path(dataset_root) / D.SPLITS_DIRNAME / f"{split}.txt"
        if p.exists():
            out[split] = hashlib.sha256(p.read_bytes()).hexdigest()[:16]
    return out


def train(
    config: TrainConfig,
    train_samples: Sequence[D.Sample],
    val_samples: Sequence[D.Sample] = (),
    run_dir: str | Path | None = None,
    dataset_root: str | Path | None = None,
    model: MultiTaskUNet | None = None,
) -> tuple[MultiTaskUNet, RunRecord]:
    """Run the full training recipe. Returns the final model and its run record."""
    config.validate()
    if not train_samples:
        raise ValueError("no training samples")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = MultiTaskUNet(config.model_config())
    if config.pretrained:
        load_pretrained_backbone(model, config.pretrained)
    optimizer = make_optimizer(model, config)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.gamma)
    record = RunRecord(config=config.to_dict(), fingerprint=source_fingerprint(), selection_metric=_selection_metric(config.mode))

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.echo").write_text(json.dumps(config.to_dict(), indent=2))
        log_file = (run_dir / "log.jsonl").open("w")

    extra = {"splits": _split_hashes(dataset_root), "train_config": config.to_dict()}
    best = -math.inf
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            sums: dict[str, float] = {}
            n_steps = 0
            t0 = time.perf_counter()
            for idx in batches(len(train_samples), config.batch_size, rng):
                batch = [prepare(train_samples[i], config.image_size, rng if config.augment else None) for i in idx]
                loss, det_r, seg_r = compute_losses(model, batch, config)
                entry = {
                    "epoch": epoch,
                    "step": step,
                    "lr": optimizer.param_groups[0]["lr"],
                    "ids": [s.id for s in batch],
                    "L_det": loss.L_det.item(),
                    "L_seg": loss.L_seg.item(),
                    "L_all": loss.L_all.item(),
                }
                if det_r is not None:
                    entry.update(L_k=det_r.L_k.item(), L_size=det_r.L_size.item(), N=det_r.N)
                if not math.isfinite(entry["L_all"]):
                    if run_dir is not None:
                        (run_dir / "nan_batch.json").write_text(json.dumps(entry, indent=2))
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}, batch {entry['ids']}")
                optimizer.zero_grad(set_to_none=True)
                loss.L_all.backward()
                optimizer.step()
                if log_file is not None:
                    log_file.write(json.dumps(entry) + "\n")
                for k in ("L_k", "L_size", "L_det", "L_seg", "L_all"):
                    if k in entry:
                        sums[k] = sums.get(k, 0.0) + entry[k]
                n_steps += 1
                step += 1
            scheduler.step()
            epoch_entry = {"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}, "seconds": time.perf_counter() - t0}
            record.epochs.append(epoch_entry)
            log.debug("epoch %d %s", epoch, epoch_entry)

            if val_samples and (epoch % config.val_every == 0 or epoch == config.epochs):
                report = evaluate_model(model, val_samples, config)
                record.validation[epoch] = report.to_json()
                score = getattr(report, record.selection_metric)
                if run_dir is not None:
                    report.write(run_dir / "metrics" / f"epoch_{epoch}.json")
                    ckpt = save_checkpoint(model, run_dir / "checkpoints" / f"epoch_{epoch}.pt", {**extra, "epoch": epoch})
                    record.checkpoints[epoch] = str(ckpt)
                if score is not None and score > best:
                    best = score
                    record.best_epoch = epoch
                    record.best_checkpoint = record.checkpoints.get(epoch)
        if run_dir is not None:
            last = save_checkpoint(model, run_dir / "checkpoints" / "last.pt", {**extra, "epoch": config.epochs})
            record.checkpoints.setdefault(config.epochs, str(last))
            if record.best_checkpoint is None:
                record.best_checkpoint = str(last)
            (run_dir / "record.json").write_text(json.dumps(record.to_json(), indent=2))
    finally:
        if log_file is not None:
            log_file.close()
    return model, record


def train_from_dataset(config: TrainConfig, dataset_root: str | Path, run_dir: str | Path | None = None):
    train_ids = D.read_split(dataset_root, "train")
    val_ids = D.read_split(dataset_root, "val")
    channels = config.backbone.in_channels
    train_samples = D.load_samples(dataset_root, train_ids, channels)
    val_samples = D.load_samples(dataset_root, val_ids, channels)
    return train(config, train_samples, val_samples, run_dir, dataset_root)


def evaluate_checkpoint(
    checkpoint: str | Path,
    dataset_root: str | Path,
    split: str = "val",
    out_dir: str | Path | None = None,
    tasks: Sequence[str] | None = None,
    image_size: tuple[int, int] | None = None,
) -> tuple[MetricsReport, list[Prediction]]:
    payload = read_checkpoint(checkpoint)
    model = load_checkpoint(checkpoint)
    tasks = mode_tasks(model.mode) if tasks is None else tuple(tasks)
    check_tasks(model.mode, tasks)
    recorded = payload.get("extra", {}).get("splits", {})
    current = _split_hashes(dataset_root)
    if split in recorded and current.get(split) != recorded[split]:
        raise SplitMismatchError(
            f"{split} manifest in {dataset_root} differs from the one the checkpoint was trained with"
        )
    train_cfg = payload.get("extra", {}).get("train_config", {})
    size = tuple(image_size or train_cfg.get("image_size", (320, 320)))
    samples = D.load_samples(dataset_root, D.read_split(dataset_root, split), model.config.backbone.in_channels)
    preds = predict(model, samples, size, train_cfg.get("top_k", 100))
    report = metrics_from_predictions(
        preds, tasks, train_cfg.get("seg_threshold", THRESHOLD), split=split, checkpoint=str(checkpoint)
    )
    if out_dir is not None:
        report.write(Path(out_dir) / "metrics.json")
    return report, preds
