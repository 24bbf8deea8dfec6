import json

import numpy as np
import pytest
import yaml
from PIL import Image

from mtunet.cli import main
from mtunet.config import ConfigError, DATA_ROOT_ENV, load_config, parse_config
from mtunet.plotting import CONFIDENCE_COLORS, TARGET_BLUE, overlay
from mtunet.postprocess import Detection

SMALL_CONFIG = {
    "backbone": {"depth": 2, "base_width": 4},
    "train": {"epochs": 2, "image_size": [32, 32], "val_every": 1},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    first = err.splitlines()[0]
    return json.loads(first)


@pytest.fixture
def synth(tmp_path, capsys):
    root = tmp_path / "synth"
    code, out, _ = run(capsys, "synth", "--out", root, "--n", 6, "--size", 32, "--seed", 0)
    assert code == 0
    return root


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return path


def test_synth_writes_triples(tmp_path, capsys):
    root = tmp_path / "s"
    code, out, _ = run(capsys, "synth", "--out", root, "--n", 16, "--seed", 0)
    assert code == 0 and json.loads(out)["n_images"] == 16
    assert len(list((root / "images").glob("*.png"))) == 16
    assert len(list((root / "masks").glob("*.png"))) == 16
    coco = json.loads((root / "annotations.json").read_text())
    for img in coco["images"]:
        n = sum(a["image_id"] == img["id"] for a in coco["annotations"])
        assert 1 <= n <= 3
    run(capsys, "synth", "--out", tmp_path / "s2", "--n", 16, "--seed", 0)
    for f in root.rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "s2" / f.relative_to(root)).read_bytes()


def test_prepare_data_idempotent(synth, capsys):
    before = {p: p.read_bytes() for p in synth.rglob("*") if p.is_file()}
    code, out, _ = run(capsys, "prepare-data", synth)
    assert code == 0 and json.loads(out)["train"] == 4
    after = {p: p.read_bytes() for p in synth.rglob("*") if p.is_file()}
    assert before == after


def test_prepare_data_uses_env_root(synth, capsys, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(synth))
    code, out, _ = run(capsys, "prepare-data")
    assert code == 0 and json.loads(out)["root"] == str(synth)


def test_prepare_data_missing_mask(synth, capsys):
    (synth / "masks" / "synth_00003.png").unlink()
    code, _, err = run(capsys, "prepare-data", synth)
    assert code == 1
    assert error_line(err)["error"] == "inconsistent-pairs"
    assert "synth_00003" in err


def test_missing_data_root(capsys, monkeypatch):
    monkeypatch.delenv(DATA_ROOT_ENV, raising=False)
    code, _, err = run(capsys, "prepare-data")
    assert code == 1 and error_line(err)["error"] == "missing-data-root"


def test_invalid_config_lists_all_problems(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"train": {"epochz": 1, "lr_": 2}, "extra": {}}))
    code, _, err = run(capsys, "train", "--config", path, "--data", tmp_path)
    assert code == 2
    assert error_line(err) == {"error": "invalid-config", "reason": "3 configuration problem(s)"}
    assert len(err.splitlines()) == 4


def test_config_parse_values():
    cfg, data = parse_config({"train": {"epochs": 5}, "postprocess": {"top_k": 10}, "data": {"root": "/x"}})
    assert cfg.epochs == 5 and cfg.top_k == 10 and data["root"] == "/x"
    with pytest.raises(ConfigError) as e:
        parse_config({"train": {"epochs": 0, "gamma": 3}})
    assert len(e.value.problems) == 2
    assert load_config(None)[0].lr == 0.001


def test_config_command_round_trips(capsys, tmp_path):
    code, out, _ = run(capsys, "config")
    assert code == 0
    (tmp_path / "c.yaml").write_text(out)
    assert load_config(tmp_path / "c.yaml")[0] == load_config(None)[0]


def test_train_eval_bench(synth, config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, err = run(capsys, "train", "--config", config_file, "--data", synth, "--run-dir", run_dir, "--mode", "multitask")
    assert code == 0, err
    assert json.loads(out)["epochs"] == 2
    assert (run_dir / "losses.png").exists() and (run_dir / "config.yaml").exists()
    lines = (run_dir / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2

    ckpt = run_dir / "checkpoints" / "last.pt"
    out_dir = tmp_path / "eval"
    code, out, err = run(capsys, "eval", ckpt, "--data", synth, "--out", out_dir)
    assert code == 0, err
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert {"AP", "AP50", "AP75", "target_iou", "background_iou", "miou"} <= metrics.keys()
    for name in ("metrics.csv", "metrics.txt", "detections.json", "detections.csv", "pr_curve.png"):
        assert (out_dir / name).exists(), name
    assert len(list((out_dir / "overlays").glob("*.png"))) == 2
    assert len(list((out_dir / "masks").glob("*.png"))) == 2

    code, out, _ = run(capsys, "bench", ckpt, "--n", 1, "--size", 32, "--compare", "--out", tmp_path / "bench")
    assert code == 0
    result = json.loads(out)
    assert result["benchmark"]["n_images"] == 1
    assert result["benchmark"]["mean_ms"] > 0 and "hardware" in result["benchmark"]["note"]
    assert set(result["compare"]) == {"seg_only", "det_only", "multitask"}
    assert (tmp_path / "bench" / "timing.png").exists()


def test_eval_modes(synth, config_file, tmp_path, capsys):
    for mode, keys, absent in (("det", {"AP", "AP50", "AP75"}, "miou"), ("seg", {"target_iou", "background_iou", "miou"}, "AP50")):
        run_dir = tmp_path / mode
        code, _, err = run(capsys, "train", "--config", config_file, "--data", synth, "--run-dir", run_dir, "--mode", mode, "--epochs", 1)
        assert code == 0, err
        code, out, _ = run(capsys, "eval", run_dir / "checkpoints" / "last.pt", "--data", synth, "--out", tmp_path / f"e{mode}", "--no-overlays")
        metrics = json.loads(out)["metrics"]
        assert keys <= metrics.keys() and absent not in metrics
    code, _, err = run(capsys, "eval", tmp_path / "det" / "checkpoints" / "last.pt", "--data", synth, "--out", tmp_path / "x", "--tasks", "seg")
    assert code == 1 and error_line(err)["error"] == "mode"


def test_pretrained_mismatch_is_one_error(synth, config_file, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--config", config_file, "--data", synth, "--run-dir", tmp_path / "a", "--mode", "det", "--epochs", 1)
    assert code == 0
    deep = tmp_path / "deep.yaml"
    deep.write_text(yaml.safe_dump({**SMALL_CONFIG, "backbone": {"depth": 3, "base_width": 4}}))
    code, _, err = run(
        capsys, "train", "--config", deep, "--data", synth, "--run-dir", tmp_path / "b", "--pretrained", tmp_path / "a" / "checkpoints" / "last.pt"
    )
    assert code == 1
    line = error_line(err)
    assert line["error"] == "backbone-mismatch" and "depth: checkpoint 2 vs model 3" in line["reason"]


# -- overlays --------------------------------------------------------------------


def test_overlay_pixels_exact():
    image = np.full((8, 8), 0.5, dtype=np.float32)
    mask = np.zeros((8, 8), bool)
    mask[3, 3] = True
    img = np.asarray(overlay(image, mask, [Detection(0.5, 0.5, 5.5, 5.5, 0.9)]))
    assert tuple(img[3, 3]) == TARGET_BLUE
    red = CONFIDENCE_COLORS[0][1]
    assert tuple(img[1, 1]) == red and tuple(img[5, 5]) == red and tuple(img[1, 3]) == red
    assert tuple(img[0, 0]) == (128, 128, 128)
    assert tuple(img[2, 2]) == (128, 128, 128)


def test_overlay_skips_low_scores_and_is_deterministic():
    image = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    dets = [Detection(2, 2, 6, 6, 0.1), Detection(8, 8, 12, 12, 0.6)]
    a = np.asarray(overlay(image, None, dets))
    b = np.asarray(overlay(image, None, dets))
    np.testing.assert_array_equal(a, b)
    assert tuple(a[2, 5]) != (0, 255, 0)
    assert tuple(a[8, 10]) == CONFIDENCE_COLORS[1][1]
    assert tuple(a[10, 10]) != CONFIDENCE_COLORS[1][1]
    Image.fromarray(a)
