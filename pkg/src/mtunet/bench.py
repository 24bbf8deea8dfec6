"""Single-image inference timing."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import torch

from .backbone import BackboneConfig
from .model import ModelMode, MultiTaskUNet, build_model

HARDWARE_NOTE = "absolute timings depend on hardware, thread count and backend; compare ratios, not milliseconds"


@dataclass
class TimingReport:
    mode: str
    n_images: int
    image_size: tuple[int, int]
    mean_ms: float
    median_ms: float
    images_per_s: float
    parameters: int
    note: str = HARDWARE_NOTE
    samples_ms: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "samples_ms"}
        d["image_size"] = list(self.image_size)
        return d


def _forward(model: MultiTaskUNet, x: torch.Tensor) -> None:
    out = model(x)
    # results must be materialised for the timing to count
    if out._det is not None:
        out._det.heatmap.sum().item()
    if out._seg is not None:
        out._seg.sum().item()


def _report(model: MultiTaskUNet, size, times: list[float]) -> TimingReport:
    mean = statistics.fmean(times)
    return TimingReport(
        mode=model.mode.value,
        n_images=len(times),
        image_size=tuple(size),
        mean_ms=1000 * mean,
        median_ms=1000 * statistics.median(times),
        images_per_s=1.0 / mean if mean > 0 else float("inf"),
        parameters=sum(p.numel() for p in model.parameters()),
        samples_ms=[1000 * t for t in times],
    )


@torch.no_grad()
def benchmark(model: MultiTaskUNet, n_images: int = 2000, image_size=(320, 320), warmup: int | None = None, seed: int = 0) -> TimingReport:
    """``warmup`` (default ``n_images``) untimed passes, then ``n_images`` timed single-image passes."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(1, model.config.backbone.in_channels, *image_size, generator=gen)
    for _ in range(n_images if warmup is None else warmup):
        _forward(model, x)
    times = []
    for _ in range(n_images):
        t0 = time.perf_counter()
        _forward(model, x)
        times.append(time.perf_counter() - t0)
    return _report(model, image_size, times)


@torch.no_grad()
def compare_modes(
    backbone: BackboneConfig | None = None,
    n_images: int = 200,
    image_size=(320, 320),
    warmup: int = 3,
    seed: int = 0,
) -> dict[str, TimingReport]:
    """Time seg-only, det-only and multitask models round-robin so drift hits all three alike."""
    torch.manual_seed(seed)
    models = {m.value: build_model(m, backbone).eval() for m in (ModelMode.SEG_ONLY, ModelMode.DET_ONLY, ModelMode.MULTITASK)}
    gen = torch.Generator().manual_seed(seed)
    in_ch = next(iter(models.values())).config.backbone.in_channels
    x = torch.rand(1, in_ch, *image_size, generator=gen)
    for _ in range(warmup):
        for m in models.values():
            _forward(m, x)
    times = {k: [] for k in models}
    for _ in range(n_images):
        for k, m in models.items():
            t0 = time.perf_counter()
            _forward(m, x)
            times[k].append(time.perf_counter() - t0)
    return {k: _report(models[k], image_size, v) for k, v in times.items()}


def speed_ratio(reports: dict[str, TimingReport]) -> float:
    """Multitask time over the seg-only + det-only composite."""
    composite = reports["seg_only"].mean_ms + reports["det_only"].mean_ms
    return reports["multitask"].mean_ms / composite
