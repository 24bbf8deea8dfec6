"""Command-line entry points: prepare-data, synth, train, eval, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .bench import benchmark, compare_modes, speed_ratio
from .config import DATA_ROOT_ENV, ConfigError, dump_config, load_config
from .evaluation import ImageDetections, pr_curve
from .model import ConfigMismatchError, ModeError, load_checkpoint
from .plotting import overlay, plot_losses, plot_pr_curves, plot_timings
from .postprocess import to_coco_results
from .segmentation import binarize, save_mask_png
from .trainer import SplitMismatchError, TrainingError, evaluate_checkpoint, train_from_dataset

log = logging.getLogger("mtunet")


class CliError(Exception):
    def __init__(self, code: str, reason: str, detail: list[str] | None = None):
        super().__init__(reason)
        self.code = code
        self.reason = reason
        self.detail = detail or []


def _data_root(arg: str | None, cfg_data: dict | None = None) -> Path:
    root = arg or (cfg_data or {}).get("root")
    if not root:
        raise CliError("missing-data-root", f"no dataset root given (use --data or ${DATA_ROOT_ENV})")
    return Path(root)


# -- prepare-data -----------------------------------------------------------------


def cmd_prepare_data(dataset_root: str | Path, out_root: str | Path | None = None, seed: int = 0, train_fraction: float = 0.7) -> dict:
    """Regenerate COCO boxes from masks and write the train/val manifests."""
    dataset_root = Path(dataset_root)
    out_root = Path(out_root) if out_root else dataset_root
    pairs, problems = D.find_pairs(dataset_root)
    if problems:
        raise CliError("inconsistent-pairs", f"{len(problems)} image/mask problems in {dataset_root}", problems)
    if not pairs:
        raise CliError("empty-dataset", f"no image/mask pairs under {dataset_root}")
    samples = []
    for sample_id, (image_path, mask_path) in pairs.items():
        image = D.read_image(image_path)
        mask = D.read_mask(mask_path)
        samples.append(D.make_sample(image, mask, sample_id))
        if out_root != dataset_root:
            (out_root / D.IMAGE_DIRNAME).mkdir(parents=True, exist_ok=True)
            (out_root / D.MASK_DIRNAME).mkdir(parents=True, exist_ok=True)
            shutil.copyfile(image_path, out_root / D.IMAGE_DIRNAME / f"{sample_id}{image_path.suffix}")
            shutil.copyfile(mask_path, out_root / D.MASK_DIRNAME / f"{sample_id}{mask_path.suffix}")
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / D.ANNOTATIONS_FILENAME).write_text(json.dumps(D.coco_annotations(samples), indent=1))
    train, val = D.split_dataset([s.id for s in samples], D.SplitSpec(train_fraction, seed))
    D.write_split_manifest(out_root, train, val)
    return {"root": str(out_root), "n_images": len(samples), "n_boxes": sum(len(s.boxes) for s in samples), "train": len(train), "val": len(val)}


def cmd_synth(out: str | Path, cfg: D.SynthConfig, seed: int = 0) -> dict:
    samples = D.synth_generate(cfg, np.random.default_rng(seed))
    D.write_dataset(out, samples, D.SplitSpec(seed=seed))
    return {"root": str(out), "n_images": len(samples), "n_boxes": sum(len(s.boxes) for s in samples)}


# -- eval --------------------------------------------------------------------------


def cmd_eval(checkpoint: str | Path, dataset_root: str | Path, split: str, out: str | Path, tasks=None, overlays: bool = True) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report, preds = evaluate_checkpoint(checkpoint, dataset_root, split, out, tasks)
    rows = report.percentages()
    with (out / "metrics.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows.items())
    (out / "metrics.txt").write_text(report.table() + "\n")
    has_det = report.AP is not None
    has_seg = report.miou is not None
    if has_det:
        image_ids = list(range(1, len(preds) + 1))
        results = to_coco_results([p.detections for p in preds], image_ids)
        (out / "detections.json").write_text(json.dumps(results))
        with (out / "detections.csv").open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "x1", "y1", "x2", "y2", "score"])
            for p in preds:
                for d in p.detections:
                    writer.writerow([p.sample.id, f"{d.x1:.3f}", f"{d.y1:.3f}", f"{d.x2:.3f}", f"{d.y2:.3f}", f"{d.score:.6f}"])
        dets = [ImageDetections.from_pairs([(d.xyxy, d.score) for d in p.detections]) for p in preds]
        gts = [np.asarray([b.xyxy for b in p.sample.boxes], dtype=float).reshape(-1, 4) for p in preds]
        plot_pr_curves([pr_curve(dets, gts, t) for t in (0.5, 0.75)], out / "pr_curve.png")
    if overlays:
        (out / "overlays").mkdir(exist_ok=True)
        if has_seg:
            (out / "masks").mkdir(exist_ok=True)
        for p in preds:
            mask = binarize(p.seg_probs) if has_seg else None
            if mask is not None:
                save_mask_png(mask, out / "masks" / f"{p.sample.id}.png")
            overlay(p.sample.image, mask, p.detections or ()).save(out / "overlays" / f"{p.sample.id}.png")
    return {"metrics": report.to_json(), "out": str(out)}


def cmd_bench(checkpoint: str | Path, n_images: int = 2000, image_size: int = 320, compare: bool = False, out: str | Path | None = None) -> dict:
    model = load_checkpoint(checkpoint)
    size = (image_size, image_size)
    report = benchmark(model, n_images, size)
    result = {"benchmark": report.to_json()}
    if compare:
        reports = compare_modes(model.config.backbone, n_images, size)
        result["compare"] = {k: v.to_json() for k, v in reports.items()}
        result["multitask_over_composite"] = speed_ratio(reports)
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            plot_timings({k: np.asarray(v.samples_ms) / 1000 for k, v in reports.items()}, Path(out) / "timing.png")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "bench.json").write_text(json.dumps(result, indent=2))
    return result


# -- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtunet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="regenerate COCO boxes from masks and split 70/30")
    s.add_argument("dataset_root", nargs="?")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic infrared dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--targets", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    s.add_argument("--sigma", type=float, nargs=2, default=(0.8, 2.0), metavar=("MIN", "MAX"))
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--run-dir")
    s.add_argument("--mode", choices=["seg", "det", "multitask", "seg_only", "det_only"])
    s.add_argument("--pretrained")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", nargs="+", choices=["det", "seg"])
    s.add_argument("--no-overlays", action="store_true")

    s = sub.add_parser("bench", help="time single-image inference")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--size", type=int, default=320)
    s.add_argument("--compare", action="store_true", help="also time seg-only, det-only and multitask models")
    s.add_argument("--out")

    s = sub.add_parser("config", help="print the default configuration")
    return p


def run(args: argparse.Namespace) -> dict:
    if args.command == "prepare-data":
        return cmd_prepare_data(_data_root(args.dataset_root, {"root": os.environ.get(DATA_ROOT_ENV)}), args.out, args.seed)
    if args.command == "synth":
        cfg = D.SynthConfig(
            n_images=args.n,
            height=args.size,
            width=args.size,
            targets_per_image=tuple(args.targets),
            sigma_range=tuple(args.sigma),
            noise_std=args.noise,
        )
        return cmd_synth(args.out, cfg, args.seed)
    if args.command == "train":
        cfg, data = load_config(args.config)
        overrides = {}
        if args.mode:
            overrides["mode"] = args.mode
        if args.pretrained:
            overrides["pretrained"] = args.pretrained
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        if overrides:
            cfg = replace(cfg, **overrides)
            problems = cfg.problems()
            if problems:
                raise ConfigError(problems)
        root = _data_root(args.data, data)
        run_dir = Path(args.run_dir or data.get("run_dir") or "runs/default")
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.yaml").write_text(dump_config(cfg, {"root": str(root), "run_dir": str(run_dir)}))
        _, record = train_from_dataset(cfg, root, run_dir)
        plot_losses(record.epochs, run_dir / "losses.png")
        return {"run_dir": str(run_dir), "epochs": len(record.epochs), "best_checkpoint": record.best_checkpoint}
    if args.command == "eval":
        return cmd_eval(args.checkpoint, _data_root(args.data, {"root": os.environ.get(DATA_ROOT_ENV)}), args.split, args.out, args.tasks, not args.no_overlays)
    if args.command == "bench":
        return cmd_bench(args.checkpoint, args.n, args.size, args.compare, args.out)
    if args.command == "config":
        print(dump_config(load_config(None)[0]), end="")
        return {}
    raise CliError("unknown-command", args.command)


def _fail(code: str, reason: str, detail: list[str] = ()) -> int:
    print(json.dumps({"error": code, "reason": reason}), file=sys.stderr)
    for line in detail:
        print(f"  {line}", file=sys.stderr)
    return 2 if code == "invalid-config" else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except CliError as e:
        return _fail(e.code, e.reason, e.detail)
    except ConfigError as e:
        return _fail("invalid-config", f"{len(e.problems)} configuration problem(s)", e.problems)
    except ConfigMismatchError as e:
        return _fail("backbone-mismatch", str(e))
    except ModeError as e:
        return _fail("mode", str(e))
    except SplitMismatchError as e:
        return _fail("split-mismatch", str(e))
    except TrainingError as e:
        return _fail("training", str(e))
    except (FileNotFoundError, KeyError, ValueError) as e:
        return _fail(type(e).__name__, str(e))
    if result:
        print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
