"""COCO-style box AP and dataset-accumulated segmentation IoU."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100

Box = Sequence[float]  # (x1, y1, x2, y2), continuous coordinates


def box_iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d = dets[:, None, :]
    g = gts[None, :, :]
    iw = np.clip(np.minimum(d[..., 2], g[..., 2]) - np.maximum(d[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(d[..., 3], g[..., 3]) - np.maximum(d[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    area_d = (d[..., 2] - d[..., 0]) * (d[..., 3] - d[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    union = area_d + area_g - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass
class ImageDetections:
    boxes: np.ndarray  # (D, 4)
    scores: np.ndarray  # (D,)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Box, float]]) -> "ImageDetections":
        if not pairs:
            return cls(np.zeros((0, 4)), np.zeros(0))
        boxes, scores = zip(*pairs)
        return cls(np.asarray(boxes, dtype=float).reshape(-1, 4), np.asarray(scores, dtype=float))


def _match_image(dets: ImageDetections, gts: np.ndarray, threshold: float, max_dets: int):
    """Greedy matching in descending score; each GT matched at most once, best IoU first."""
    order = np.argsort(-dets.scores, kind="mergesort")[:max_dets]
    ious = iou_matrix(dets.boxes[order], gts)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for i in range(len(order)):
        best, best_iou = -1, min(threshold, 1 - 1e-10)
        for j in range(len(gts)):
            if taken[j] or ious[i, j] < best_iou:
                continue
            best, best_iou = j, ious[i, j]
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return dets.scores[order], tp


@dataclass
class PRCurve:
    threshold: float
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    num_gt: int
    true_positives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def interpolated(self, points: int = len(RECALL_POINTS)) -> np.ndarray:
        """Envelope precision at ``points`` evenly spaced recall levels (0 where unreachable).

        Recall levels are compared exactly as integers, tp * (points - 1) >= k * num_gt,
        so a recall of 7/10 reaches the 0.70 level.
        """
        if self.num_gt == 0 or len(self.precision) == 0:
            return np.zeros(points)
        envelope = np.maximum.accumulate(self.precision[::-1])[::-1]
        levels = np.arange(points, dtype=np.int64) * self.num_gt
        reached = self.true_positives[:, None] * (points - 1) >= levels[None, :]
        any_reached = reached.any(axis=0)
        first = reached.argmax(axis=0)
        return np.where(any_reached, envelope[first], 0.0)

    @property
    def ap(self) -> float:
        return float(self.interpolated().mean())


def pr_curve(
    detections: Sequence[ImageDetections],
    ground_truths: Sequence[np.ndarray],
    iou_threshold: float,
    max_dets: int = MAX_DETS,
) -> PRCurve:
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths cover different image counts")
    scores, hits = [], []
    num_gt = 0
    for dets, gts in zip(detections, ground_truths):
        gts = np.asarray(gts, dtype=float).reshape(-1, 4)
        num_gt += len(gts)
        s, tp = _match_image(dets, gts, iou_threshold, max_dets)
        scores.append(s)
        hits.append(tp)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    hits = np.concatenate(hits) if hits else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    hits = hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt if num_gt else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    return PRCurve(iou_threshold, precision, recall, scores[order], num_gt, tp.astype(np.int64))


def average_precision(
    detections: Sequence[ImageDetections],
    ground_truths: Sequence[np.ndarray],
    iou_threshold: float,
    max_dets: int = MAX_DETS,
) -> float:
    """101-point interpolated AP at one IoU threshold. No ground truth at all gives 0."""
    return pr_curve(detections, ground_truths, iou_threshold, max_dets).ap


@dataclass
class DetectionMetrics:
    AP: float
    AP50: float
    AP75: float
    per_threshold: dict[float, float]
    num_gt: int
    num_detections: int
    undefined: bool = False


def evaluate_detections(
    detections: Sequence[ImageDetections],
    ground_truths: Sequence[np.ndarray],
    max_dets: int = MAX_DETS,
) -> DetectionMetrics:
    per = {float(t): average_precision(detections, ground_truths, float(t), max_dets) for t in IOU_THRESHOLDS}
    num_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in ground_truths)
    num_det = sum(min(len(d.scores), max_dets) for d in detections)
    return DetectionMetrics(
        AP=float(np.mean(list(per.values()))),
        AP50=per[0.5],
        AP75=per[0.75],
        per_threshold=per,
        num_gt=num_gt,
        num_detections=num_det,
        undefined=num_gt == 0,
    )


# -- segmentation ---------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        self.tp += int(np.count_nonzero(pred & gt))
        self.fp += int(np.count_nonzero(pred & ~gt))
        self.fn += int(np.count_nonzero(~pred & gt))
        self.tn += int(np.count_nonzero(~pred & ~gt))
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @staticmethod
    def _ratio(inter: int, union: int) -> float:
        # an empty union means both sides agree there is nothing of that class
        return inter / union if union else 1.0

    @property
    def target_iou(self) -> float:
        return self._ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def background_iou(self) -> float:
        return self._ratio(self.tn, self.tn + self.fp + self.fn)

    @property
    def miou(self) -> float:
        return (self.target_iou + self.background_iou) / 2


def segmentation_iou(pred, gt) -> tuple[float, float, float]:
    """(target IoU, background IoU, mIoU) for one mask pair or lists of them, accumulated."""
    counts = ConfusionCounts()
    if isinstance(pred, (list, tuple)):
        for p, g in zip(pred, gt, strict=True):
            counts.update(p, g)
    else:
        counts.update(pred, gt)
    return counts.target_iou, counts.background_iou, counts.miou


# -- reports -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    AP: float | None = None
    AP50: float | None = None
    AP75: float | None = None
    target_iou: float | None = None
    background_iou: float | None = None
    miou: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, det: DetectionMetrics | None = None, seg: ConfusionCounts | None = None, **diag) -> "MetricsReport":
        r = cls(diagnostics=dict(diag))
        if det is not None:
            r.AP, r.AP50, r.AP75 = det.AP, det.AP50, det.AP75
            r.diagnostics.update(num_gt=det.num_gt, num_detections=det.num_detections, ap_undefined=det.undefined)
        if seg is not None:
            r.target_iou, r.background_iou, r.miou = seg.target_iou, seg.background_iou, seg.miou
            r.diagnostics.update(confusion=asdict(seg))
        return r

    def percentages(self) -> dict[str, float]:
        keys = ("AP", "AP50", "AP75", "target_iou", "background_iou", "miou")
        return {k: round(100 * getattr(self, k), 4) for k in keys if getattr(self, k) is not None}

    def to_json(self) -> dict:
        return {**self.percentages(), "units": "percent", "diagnostics": self.diagnostics}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, default=_json_default))
        return path

    def table(self) -> str:
        rows = self.percentages()
        width = max((len(k) for k in rows), default=6)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        lines += [f"{k:<{width}}  {v:6.2f}" for k, v in rows.items()]
        return "\n".join(lines)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


# -- COCO files ----------------------------------------------------------------------


def coco_to_xyxy(bbox: Sequence[float]) -> tuple[float, float, float, float]:
    x, y, w, h = bbox
    return (x, y, x + w, y + h)


def load_coco_ground_truth(path: str | Path) -> tuple[list[int], dict[int, np.ndarray]]:
    data = json.loads(Path(path).read_text())
    image_ids = [img["id"] for img in data["images"]]
    boxes: dict[int, list] = {i: [] for i in image_ids}
    for ann in data["annotations"]:
        boxes.setdefault(ann["image_id"], []).append(coco_to_xyxy(ann["bbox"]))
    return image_ids, {k: np.asarray(v, dtype=float).reshape(-1, 4) for k, v in boxes.items()}


def load_coco_results(path: str | Path) -> dict[int, ImageDetections]:
    data = json.loads(Path(path).read_text())
    grouped: dict[int, list] = {}
    for r in data:
        grouped.setdefault(r["image_id"], []).append((coco_to_xyxy(r["bbox"]), r["score"]))
    return {k: ImageDetections.from_pairs(v) for k, v in grouped.items()}


def evaluate_coco_files(annotations: str | Path, results: str | Path, image_ids: Sequence[int] | None = None) -> DetectionMetrics:
    ids, gts = load_coco_ground_truth(annotations)
    dets = load_coco_results(results)
    ids = list(image_ids) if image_ids is not None else ids
    empty = ImageDetections(np.zeros((0, 4)), np.zeros(0))
    return evaluate_detections([dets.get(i, empty) for i in ids], [gts.get(i, np.zeros((0, 4))) for i in ids])
