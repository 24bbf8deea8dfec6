import numpy as np
import pytest
import torch

from mtunet.data import BoxAnnotation
from mtunet.detection import DetectionOutputs, draw_gaussian
from mtunet.postprocess import Detection, Peak, assemble_boxes, decode, extract_peaks, to_coco_results
import oracles


def test_single_global_maximum():
    heat = np.zeros((16, 16))
    heat[7, 5] = 0.9
    assert extract_peaks(heat) == [Peak(5, 7, 0, 0.9)]


def test_two_gaussians_twenty_apart():
    heat = np.zeros((40, 40))
    draw_gaussian(heat, (8, 10), 2.0)
    draw_gaussian(heat, (28, 10), 2.0)
    peaks = extract_peaks(heat)
    assert sorted((p.x, p.y) for p in peaks) == [(8, 10), (28, 10)]
    assert sorted((p.y, p.x) for p in peaks) == oracles.brute_peaks(heat.tolist(), 0.25)


def test_uniform_below_threshold_is_empty():
    assert extract_peaks(np.full((8, 8), 0.1), score_threshold=0.5) == []


def test_plateau_yields_one_peak():
    heat = np.zeros((8, 8))
    heat[2:4, 2:5] = 0.8
    assert extract_peaks(heat) == [Peak(2, 2, 0, 0.8)]


def test_top_k_and_ordering():
    heat = np.zeros((20, 20))
    for i, v in enumerate([0.3, 0.9, 0.6, 0.7]):
        heat[2 + 4 * i, 3] = v
    peaks = extract_peaks(heat, top_k=2)
    assert [p.score for p in peaks] == [0.9, 0.7]
    with pytest.raises(ValueError):
        extract_peaks(heat, top_k=0)


def test_peaks_match_brute_force(rng):
    for _ in range(100):
        heat = np.round(rng.random((10, 10)), 1)  # coarse values make plateaus common
        got = sorted((p.y, p.x) for p in extract_peaks(heat, top_k=1000, score_threshold=0.3))
        assert got == oracles.brute_peaks(heat.tolist(), 0.3)


def test_multi_class_channels():
    heat = np.zeros((2, 8, 8))
    heat[0, 1, 1] = 0.5
    heat[1, 6, 6] = 0.8
    assert extract_peaks(heat) == [Peak(6, 6, 1, 0.8), Peak(1, 1, 0, 0.5)]


def _size_map(h, w, at, value):
    s = np.zeros((2, h, w))
    s[:, at[1], at[0]] = value
    return s


def test_box_from_peak_and_size():
    (d,) = assemble_boxes([Peak(10, 10, 0, 0.9)], _size_map(32, 32, (10, 10), (4, 6)), (32, 32))
    assert d.xyxy == (8, 7, 12, 13)


def test_negative_size_clamped():
    (d,) = assemble_boxes([Peak(10, 10, 0, 0.9)], _size_map(32, 32, (10, 10), (-2, 3)), (32, 32))
    assert d.xyxy == (9.5, 8.5, 10.5, 11.5)


def test_corner_box_clipped_to_image():
    (d,) = assemble_boxes([Peak(0, 0, 0, 0.9)], _size_map(32, 32, (0, 0), (6, 6)), (32, 32))
    # the image spans [-0.5, W - 0.5] in the pixel-centre frame
    assert d.xyxy == (-0.5, -0.5, 3, 3)
    (d,) = assemble_boxes([Peak(31, 31, 0, 0.9)], _size_map(32, 32, (31, 31), (6, 6)), (32, 32))
    assert d.xyxy == (28, 28, 31.5, 31.5)


def test_offset_shifts_center():
    off = np.zeros((2, 8, 8))
    off[:, 3, 3] = 0.5
    (d,) = assemble_boxes([Peak(3, 3, 0, 0.9)], _size_map(8, 8, (3, 3), (2, 2)), (8, 8), off)
    assert d.center == (3.5, 3.5) and d.size == (2, 2)


def test_coco_bbox_matches_annotation_convention():
    b = BoxAnnotation.from_extent(4, 5, 7, 6)
    d = Detection(*b.xyxy, score=1.0)
    assert d.coco_bbox() == list(b.coco_bbox)


def test_decode_batch_and_coco_export():
    heat = torch.zeros(2, 1, 8, 8)
    heat[0, 0, 2, 3] = 0.9
    size = torch.ones(2, 2, 8, 8) * 2
    res = decode(DetectionOutputs(heat, size))
    assert len(res) == 2 and len(res[0]) == 1 and res[1] == []
    coco = to_coco_results(res, [7, 8])
    assert coco == [{"image_id": 7, "category_id": 1, "bbox": [2.5, 1.5, 2.0, 2.0], "score": pytest.approx(0.9)}]
