"""Samples, box annotations, dataset splits, augmentation, resizing and synthetic data.

Boxes use inclusive pixel indices: a box ``(x1, y1, x2, y2)`` covers columns
``x1..x2`` and rows ``y1..y2``. Masks are the source of truth; every stage that
changes geometry recomputes boxes from the transformed mask so that each box
encloses exactly one 8-connected component.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
IMAGE_DIRNAME = "images"
MASK_DIRNAME = "masks"
ANNOTATIONS_FILENAME = "annotations.json"
SPLITS_DIRNAME = "splits"
CATEGORY = {"id": 1, "name": "target"}


@dataclass(frozen=True)
class BoxAnnotation:
    x1: int
    y1: int
    x2: int
    y2: int
    centroid: tuple[float, float]
    area: int

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box {self.corners}")

    @property
    def corners(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        """Continuous extent in the heatmap frame, where pixel ``i`` spans ``[i-0.5, i+0.5]``."""
        return (self.x1 - 0.5, self.y1 - 0.5, self.x2 + 0.5, self.y2 + 0.5)

    @property
    def coco_bbox(self) -> list[int]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_extent(cls, x1: int, y1: int, x2: int, y2: int) -> "BoxAnnotation":
        """Box of a filled rectangle; centroid and area follow from the extent."""
        return cls(x1, y1, x2, y2, ((x1 + x2) / 2, (y1 + y2) / 2), (x2 - x1 + 1) * (y2 - y1 + 1))


@dataclass
class Sample:
    image: np.ndarray  # (H, W) or (H, W, C) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool
    boxes: list[BoxAnnotation]
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0


def _check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool:
        values = np.unique(mask)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"mask is not binary; found values {values[:8].tolist()}")
        mask = mask.astype(bool)
    return mask


def mask_to_boxes(mask: np.ndarray) -> list[BoxAnnotation]:
    """Tight boxes, centroids and pixel areas of the 8-connected components of ``mask``.

    Components are returned in label order (raster order of their first pixel).
    """
    mask = _check_binary(mask)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    boxes = []
    for index, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == index)
        boxes.append(
            BoxAnnotation(
                x1=int(sl[1].start),
                y1=int(sl[0].start),
                x2=int(sl[1].stop - 1),
                y2=int(sl[0].stop - 1),
                centroid=(float(xs.mean() + sl[1].start), float(ys.mean() + sl[0].start)),
                area=int(xs.size),
            )
        )
    return boxes


def make_sample(image: np.ndarray, mask: np.ndarray, sample_id: str) -> Sample:
    mask = _check_binary(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"{sample_id}: image {image.shape[:2]} and mask {mask.shape} differ")
    return Sample(image=np.asarray(image, dtype=np.float32), mask=mask, boxes=mask_to_boxes(mask), id=sample_id)


def split_dataset(ids: Sequence[str], spec: SplitSpec = SplitSpec()) -> tuple[list[str], list[str]]:
    if len(ids) == 0:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    ordered = sorted(ids)
    perm = np.random.default_rng(spec.seed).permutation(len(ordered))
    n_train = math.floor(spec.train_fraction * len(ordered))
    train = sorted(ordered[i] for i in perm[:n_train])
    val = sorted(ordered[i] for i in perm[n_train:])
    return train, val


def write_split_manifest(root: str | Path, train: Iterable[str], val: Iterable[str]) -> None:
    split_dir = Path(root) / SPLITS_DIRNAME
    split_dir.mkdir(parents=True, exist_ok=True)
    (split_dir / "train.txt").write_text("".join(f"{i}\n" for i in train))
    (split_dir / "val.txt").write_text("".join(f"{i}\n" for i in val))


def read_split(root: str | Path, split: str) -> list[str]:
    path = Path(root) / SPLITS_DIRNAME / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"split manifest {path} does not exist")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


# -- geometry ---------------------------------------------------------------


def hflip(sample: Sample) -> Sample:
    mask = sample.mask[:, ::-1].copy()
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=mask, boxes=mask_to_boxes(mask))


def crop(sample: Sample, top: int, left: int, height: int, width: int) -> Sample:
    mask = sample.mask[top : top + height, left : left + width].copy()
    image = sample.image[top : top + height, left : left + width].copy()
    return replace(sample, image=image, mask=mask, boxes=mask_to_boxes(mask))


def augment(
    sample: Sample,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    scale_range: tuple[float, float] = (0.6, 1.0),
    max_tries: int = 10,
) -> Sample:
    """Random horizontal flip followed by a random crop.

    Crops that remove every target of a non-empty sample are redrawn up to
    ``max_tries`` times; after that the sample is left uncropped.
    """
    if rng.random() < flip_prob:
        sample = hflip(sample)
    h, w = sample.shape
    for _ in range(max_tries):
        ch = max(1, round(h * rng.uniform(*scale_range)))
        cw = max(1, round(w * rng.uniform(*scale_range)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        cropped = crop(sample, top, left, ch, cw)
        if cropped.boxes or not sample.boxes:
            return cropped
    return sample


def resize(sample: Sample, size: tuple[int, int] = (320, 320)) -> Sample:
    """Bilinear image / nearest-neighbour mask resize to ``size`` = (height, width)."""
    h, w = sample.shape
    if h == 0 or w == 0:
        raise ValueError(f"{sample.id}: cannot resize an empty image")
    if (h, w) == tuple(size):
        return sample
    th, tw = size
    image = sample.image
    if image.ndim == 2:
        image = np.asarray(Image.fromarray(image.astype(np.float32), mode="F").resize((tw, th), Image.BILINEAR))
    else:
        image = np.stack(
            [
                np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F").resize((tw, th), Image.BILINEAR))
                for c in range(image.shape[-1])
            ],
            axis=-1,
        )
    # Nearest neighbour on pixel centres.
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    mask = sample.mask[np.ix_(rows, cols)]
    return replace(sample, image=np.clip(image, 0.0, 1.0).astype(np.float32), mask=mask, boxes=mask_to_boxes(mask))


def scale_box(box: BoxAnnotation, sx: float, sy: float) -> tuple[float, float, float, float]:
    """Continuous edge-frame extent of ``box`` after scaling the image by (sx, sy)."""
    return (box.x1 * sx, box.y1 * sy, (box.x2 + 1) * sx, (box.y2 + 1) * sy)


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 16
    height: int = 64
    width: int = 64
    targets_per_image: tuple[int, int] = (1, 3)
    sigma_range: tuple[float, float] = (0.8, 2.0)
    elongation: tuple[float, float] = (1.0, 1.5)
    peak_range: tuple[float, float] = (0.35, 0.6)
    background_level: float = 0.25
    background_amplitude: float = 0.1
    noise_std: float = 0.02
    min_separation: float = 6.0

    def validate(self) -> None:
        lo, hi = self.targets_per_image
        if self.n_images <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError("n_images, height and width must be positive")
        if lo < 0 or hi < lo:
            raise ValueError(f"bad targets_per_image range {self.targets_per_image}")
        if not 0 < self.sigma_range[0] <= self.sigma_range[1]:
            raise ValueError(f"bad sigma_range {self.sigma_range}")
        # half-peak support of the widest blob must fit inside the image
        extent = 2 * _half_peak_radius(self.sigma_range[1] * self.elongation[1]) + 1
        if extent >= min(self.height, self.width):
            raise ValueError(
                f"targets up to {extent:.1f} px do not fit in a {self.height}x{self.width} image"
            )


def _half_peak_radius(sigma: float) -> float:
    return sigma * math.sqrt(2 * math.log(2))


def _smooth_background(rng: np.random.Generator, h: int, w: int, cfg: SynthConfig) -> np.ndarray:
    coarse = rng.standard_normal((4, 4))
    zoomed = ndimage.zoom(coarse, (h / 4, w / 4), order=3, mode="nearest")[:h, :w]
    zoomed /= max(np.abs(zoomed).max(), 1e-12)
    return cfg.background_level + cfg.background_amplitude * zoomed


def synth_image(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    background = _smooth_background(rng, h, w, cfg)
    signal = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    n_targets = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    placed: list[tuple[float, float]] = []
    for _ in range(n_targets):
        sigma = rng.uniform(*cfg.sigma_range)
        sx = sigma * rng.uniform(*cfg.elongation)
        sy = sigma
        if rng.random() < 0.5:
            sx, sy = sy, sx
        margin_x = math.ceil(_half_peak_radius(sx)) + 1
        margin_y = math.ceil(_half_peak_radius(sy)) + 1
        for _attempt in range(50):
            cx = rng.uniform(margin_x, w - 1 - margin_x)
            cy = rng.uniform(margin_y, h - 1 - margin_y)
            if all(math.hypot(cx - px, cy - py) >= cfg.min_separation + 2 * sigma for px, py in placed):
                break
        else:
            continue
        placed.append((cx, cy))
        peak = rng.uniform(*cfg.peak_range)
        blob = np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))
        signal = np.maximum(signal, peak * blob)
        mask |= blob >= 0.5
    noise = cfg.noise_std * rng.standard_normal((h, w)) if cfg.noise_std > 0 else 0.0
    image = np.clip(background + signal + noise, 0.0, 1.0).astype(np.float32)
    return image, mask


def synth_generate(cfg: SynthConfig, rng: np.random.Generator | int = 0) -> list[Sample]:
    """Smooth background + noise + elliptical Gaussian blobs; masks are half-peak level sets."""
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    samples = []
    for i in range(cfg.n_images):
        image, mask = synth_image(cfg, rng)
        samples.append(make_sample(image, mask, f"synth_{i:05d}"))
    return samples


# -- on-disk datasets ----------------------------------------------------------


def coco_annotations(samples: Sequence[Sample]) -> dict:
    images, annotations = [], []
    ann_id = 1
    for image_id, s in enumerate(samples, start=1):
        h, w = s.shape
        images.append({"id": image_id, "file_name": f"{s.id}.png", "height": h, "width": w})
        for box in s.boxes:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": CATEGORY["id"],
                    "bbox": box.coco_bbox,
                    "area": box.area,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {
        "info": {"description": "infrared small targets", "version": "1.0"},
        "images": images,
        "annotations": annotations,
        "categories": [CATEGORY],
    }


def _to_png(array: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(array, 0, 1) * 255).astype(np.uint8))


def write_dataset(root: str | Path, samples: Sequence[Sample], split: SplitSpec | None = SplitSpec()) -> Path:
    root = Path(root)
    (root / IMAGE_DIRNAME).mkdir(parents=True, exist_ok=True)
    (root / MASK_DIRNAME).mkdir(parents=True, exist_ok=True)
    for s in samples:
        _to_png(s.image).save(root / IMAGE_DIRNAME / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8) * 255).save(root / MASK_DIRNAME / f"{s.id}.png")
    (root / ANNOTATIONS_FILENAME).write_text(json.dumps(coco_annotations(samples), indent=1))
    if split is not None:
        write_split_manifest(root, *split_dataset([s.id for s in samples], split))
    return root


def read_image(path: str | Path, channels: int = 1) -> np.ndarray:
    img = Image.open(path)
    if channels == 1:
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def read_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


def find_pairs(root: str | Path) -> tuple[dict[str, tuple[Path, Path]], list[str]]:
    """Match images/ and masks/ by stem. Returns (pairs, problems).

    Mask files may carry a ``_pixels0`` suffix, as in the public SIRST release.
    """
    root = Path(root)
    images = {p.stem: p for p in sorted((root / IMAGE_DIRNAME).glob("*")) if p.is_file()}
    masks = {}
    for p in sorted((root / MASK_DIRNAME).glob("*")):
        if p.is_file():
            stem = p.stem[: -len("_pixels0")] if p.stem.endswith("_pixels0") else p.stem
            masks[stem] = p
    problems = [f"image without mask: {i}" for i in sorted(images.keys() - masks.keys())]
    problems += [f"mask without image: {i}" for i in sorted(masks.keys() - images.keys())]
    pairs = {k: (images[k], masks[k]) for k in sorted(images.keys() & masks.keys())}
    return pairs, problems


def load_samples(root: str | Path, ids: Iterable[str] | None = None, channels: int = 1) -> list[Sample]:
    pairs, problems = find_pairs(root)
    if problems:
        raise ValueError("; ".join(problems))
    wanted = list(pairs) if ids is None else list(ids)
    missing = [i for i in wanted if i not in pairs]
    if missing:
        raise KeyError(f"ids not in dataset: {missing[:10]}")
    samples = []
    for i in wanted:
        image_path, mask_path = pairs[i]
        samples.append(make_sample(read_image(image_path, channels), read_mask(mask_path), i))
    return samples
