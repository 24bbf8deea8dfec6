import math

import numpy as np
import pytest
import torch

from mtunet.data import BoxAnnotation
from mtunet.detection import (
    CLAMP_EPS,
    DetectionHead,
    DetectionOutputs,
    adaptive_sigma,
    collate_targets,
    detection_loss,
    draw_gaussian,
    encode_targets,
    focal_loss,
    gaussian_radius,
    size_loss,
)
import oracles


def box(x1, y1, x2, y2):
    return BoxAnnotation.from_extent(x1, y1, x2, y2)


# -- head ----------------------------------------------------------------------


def test_head_shapes():
    head = DetectionHead()
    out = head(torch.rand(1, 64, 32, 32))
    assert out.heatmap.shape == (1, 1, 32, 32)
    assert out.size.shape == (1, 2, 32, 32)
    assert out.offset is None


def test_head_with_offset():
    out = DetectionHead(with_offset=True)(torch.rand(1, 64, 8, 8))
    assert out.offset.shape == (1, 2, 8, 8)


def test_zero_feature_gives_constant_heatmap():
    out = DetectionHead()(torch.zeros(1, 64, 12, 12))
    heat = out.heatmap
    interior = heat[..., 1:-1, 1:-1]
    assert torch.all(interior == interior[0, 0, 0, 0])
    assert 0 < heat.min() and heat.max() < 1


def test_head_rejects_wrong_channels():
    with pytest.raises(ValueError):
        DetectionHead()(torch.rand(1, 32, 8, 8))


# -- radius and kernel ---------------------------------------------------------


def _brute_radius(w, h, o, step=1e-3):
    """Largest r on a fine grid where every corner displacement of r keeps IoU >= o."""

    def worst(r):
        inner = (w - 2 * r) * (h - 2 * r) / (w * h) if r < min(w, h) / 2 else 0.0
        outer = w * h / ((w + 2 * r) * (h + 2 * r))
        iw, ih = w - r, h - r
        mixed = (iw * ih) / (2 * w * h - iw * ih) if r < min(w, h) else 0.0
        return min(inner, outer, mixed)

    r = 0.0
    while worst(r + step) >= o:
        r += step
    return r


@pytest.mark.parametrize("w,h", [(4, 6), (1, 1), (3, 3), (7, 2), (12, 5)])
def test_radius_matches_brute_force_sweep(w, h):
    assert gaussian_radius(w, h, 0.7) == pytest.approx(_brute_radius(w, h, 0.7), abs=2e-3)


def test_radius_integer_sweep_agrees():
    # integer radii below the closed form keep IoU >= 0.7 in every case; the next one up fails somewhere
    for w in range(1, 20):
        for h in range(1, 20):
            r = gaussian_radius(w, h)
            assert _brute_radius(w, h, 0.7, step=1.0) == math.floor(r + 1e-9)


def test_radius_monotone_in_size():
    rs = [gaussian_radius(s, s) for s in range(1, 30)]
    assert all(a < b for a, b in zip(rs, rs[1:]))


def test_sigma_floor_for_single_pixel():
    assert adaptive_sigma(1, 1) > 0


@pytest.mark.parametrize("args", [(0, 3), (3, -1)])
def test_radius_rejects_nonpositive(args):
    with pytest.raises(ValueError):
        gaussian_radius(*args)


def test_kernel_peak_and_unit_distance():
    heat = np.zeros((21, 21))
    draw_gaussian(heat, (10, 10), 1.0)
    assert heat[10, 10] == 1.0
    assert heat[10, 11] == pytest.approx(math.exp(-0.5))
    assert heat[9, 10] == pytest.approx(0.6065, abs=1e-4)


def test_single_box_peak_is_one():
    t = encode_targets([box(9, 9, 11, 11)], 32, 32)
    assert t.heatmap[0, 10, 10] == 1.0
    assert (t.heatmap <= 1).all()


def test_overlaps_merge_by_max_and_order_independent():
    a, b = box(5, 5, 7, 7), box(8, 5, 10, 7)
    ab = encode_targets([a, b], 16, 16).heatmap
    ba = encode_targets([b, a], 16, 16).heatmap
    np.testing.assert_array_equal(ab, ba)
    sep = np.maximum(encode_targets([a], 16, 16).heatmap, encode_targets([b], 16, 16).heatmap)
    np.testing.assert_array_equal(ab, sep)


def test_encode_rejects_outside_box():
    with pytest.raises(ValueError):
        encode_targets([box(30, 30, 33, 33)], 32, 32)


def test_even_extent_center_and_offset():
    t = encode_targets([box(2, 2, 5, 3)], 16, 16)
    np.testing.assert_array_equal(t.centers[0], (3.5, 2.5))
    np.testing.assert_array_equal(t.keypoints[0], (3, 2))
    np.testing.assert_array_equal(t.offsets[0], (0.5, 0.5))
    np.testing.assert_array_equal(t.sizes[0], (4, 2))


# -- focal loss ----------------------------------------------------------------


def test_focal_hand_value():
    pred = torch.full((1, 1, 4, 4), CLAMP_EPS, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    pred[0, 0, 1, 1] = 0.5
    gt[0, 0, 1, 1] = 1.0
    assert focal_loss(pred, gt).item() == pytest.approx(0.25 * math.log(2), abs=1e-6)
    assert focal_loss(pred, gt).item() == pytest.approx(0.17329, abs=1e-5)


def test_focal_background_half_hand_value():
    # a Y=0.5 neighbour predicted at 0.5 costs (0.5)^4 (0.5)^2 log 2
    pred = torch.full((1, 1, 3, 3), CLAMP_EPS, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    gt[0, 0, 0, 0] = 1.0
    pred[0, 0, 0, 0] = 1 - CLAMP_EPS
    gt[0, 0, 0, 1] = 0.5
    pred[0, 0, 0, 1] = 0.5
    assert focal_loss(pred, gt).item() == pytest.approx(0.5**6 * math.log(2), abs=1e-5)


def test_focal_perfect_prediction_near_zero():
    t = encode_targets([box(3, 3, 5, 5), box(20, 10, 22, 14)], 32, 32)
    gt = torch.from_numpy(t.heatmap).double()[None]
    pred = torch.where(gt == 1, torch.tensor(1.0 - CLAMP_EPS, dtype=torch.float64), torch.tensor(CLAMP_EPS, dtype=torch.float64))
    assert focal_loss(pred, gt).item() < 1e-4 * 2


def test_focal_no_keypoints_divides_by_one():
    pred = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    assert focal_loss(pred, gt).item() == pytest.approx(4 * 0.25 * math.log(2))


def test_focal_matches_scalar_oracle(rng):
    for _ in range(100):
        gt = rng.random((8, 8)) * 0.99
        for _ in range(rng.integers(0, 4)):
            gt[rng.integers(8), rng.integers(8)] = 1.0
        pred = rng.random((8, 8))
        got = focal_loss(torch.from_numpy(pred)[None, None], torch.from_numpy(gt)[None, None]).item()
        assert got == pytest.approx(oracles.focal_loss(pred.tolist(), gt.tolist()), abs=1e-6, rel=1e-9)


def test_focal_gradient_matches_finite_differences(rng):
    gt = rng.random((1, 1, 8, 8)) * 0.9
    gt[0, 0, 2, 3] = gt[0, 0, 6, 6] = 1.0
    pred = torch.tensor(rng.uniform(0.05, 0.95, (1, 1, 8, 8)), requires_grad=True)
    gt = torch.from_numpy(gt)
    assert torch.autograd.gradcheck(lambda p: focal_loss(p, gt), (pred,), eps=1e-6, atol=1e-8, rtol=1e-3)


# -- size loss and detection loss ------------------------------------------------


def test_size_loss_hand_values():
    size_map = torch.zeros(1, 2, 8, 8)
    size_map[0, :, 3, 2] = torch.tensor([5.0, 5.0])
    index = torch.tensor([[0, 3, 2]])
    assert size_loss(size_map, index, torch.tensor([[4.0, 6.0]])).item() == 2.0
    size_map[0, :, 5, 5] = torch.tensor([1.0, 1.0])
    index = torch.tensor([[0, 3, 2], [0, 5, 5]])
    # second target (3, 3) vs (1, 1): error 4
    assert size_loss(size_map, index, torch.tensor([[4.0, 6.0], [3.0, 3.0]])).item() == 3.0


def test_size_loss_exact_is_zero():
    size_map = torch.zeros(1, 2, 4, 4)
    size_map[0, :, 1, 1] = torch.tensor([2.0, 3.0])
    assert size_loss(size_map, torch.tensor([[0, 1, 1]]), torch.tensor([[2.0, 3.0]])).item() == 0.0


def test_size_loss_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        size_loss(torch.zeros(1, 2, 4, 4), torch.tensor([[0, 4, 0]]), torch.tensor([[1.0, 1.0]]))


def test_size_loss_matches_oracle(rng):
    for _ in range(100):
        smap = rng.random((2, 8, 8)) * 10
        k = int(rng.integers(1, 5))
        kps = [(int(rng.integers(8)), int(rng.integers(8))) for _ in range(k)]
        sizes = (rng.random((k, 2)) * 10).tolist()
        index = torch.tensor([[0, y, x] for x, y in kps])
        got = size_loss(torch.from_numpy(smap)[None], index, torch.tensor(sizes, dtype=torch.float64)).item()
        assert got == pytest.approx(oracles.size_loss(smap.tolist(), kps, sizes), abs=1e-6)


def test_size_loss_gradient_only_at_centers():
    size_map = torch.zeros(1, 2, 6, 6, requires_grad=True)
    size_loss(size_map, torch.tensor([[0, 2, 3]]), torch.tensor([[1.0, 1.0]])).backward()
    nz = size_map.grad.nonzero().tolist()
    assert nz == [[0, 0, 2, 3], [0, 1, 2, 3]]


def _outputs_for(targets, heat_value=None, size_exact=True):
    batch = collate_targets([targets])
    heat = batch.heatmap.clone() if heat_value is None else torch.full_like(batch.heatmap, heat_value)
    size = torch.zeros(1, 2, *heat.shape[-2:])
    if size_exact:
        b, y, x = batch.index.unbind(1)
        size[b, :, y, x] = batch.sizes
    return DetectionOutputs(heat, size), batch


def test_detection_loss_arithmetic():
    t = encode_targets([box(3, 3, 5, 5)], 16, 16)
    out, batch = _outputs_for(t)
    rep = detection_loss(out, batch)
    assert rep.N == 1
    assert rep.L_det.item() == pytest.approx(oracles.det_loss(rep.L_k.item(), rep.L_size.item()), abs=1e-7)
    assert oracles.det_loss(0.5, 2.0) == pytest.approx(0.7)


def test_detection_loss_perfect_outputs_near_zero():
    t = encode_targets([box(3, 3, 5, 5), box(10, 8, 12, 13)], 16, 16)
    batch = collate_targets([t])
    heat = torch.where(batch.heatmap == 1, 1 - CLAMP_EPS, CLAMP_EPS)
    size = torch.zeros(1, 2, 16, 16)
    b, y, x = batch.index.unbind(1)
    size[b, :, y, x] = batch.sizes
    rep = detection_loss(DetectionOutputs(heat, size), batch)
    assert rep.L_size.item() == 0.0
    assert rep.L_det.item() < 1e-4


def test_detection_loss_matches_oracles(rng):
    for _ in range(100):
        x, y = rng.integers(1, 5, size=2)
        t = encode_targets([box(int(x), int(y), int(x) + 2, int(y) + 2)], 8, 8)
        batch = collate_targets([t])
        heat = torch.from_numpy(rng.random((1, 1, 8, 8)))
        size = torch.from_numpy(rng.random((1, 2, 8, 8)) * 5)
        rep = detection_loss(DetectionOutputs(heat, size), batch)
        kx, ky = t.keypoints[0]
        l_k = oracles.focal_loss(heat[0, 0].tolist(), t.heatmap[0].astype(float).tolist())
        l_s = oracles.size_loss(size[0].tolist(), [(kx, ky)], t.sizes.tolist())
        assert rep.L_det.item() == pytest.approx(oracles.det_loss(l_k, l_s), abs=1e-6)


def test_detection_loss_offset_term():
    t = encode_targets([box(2, 2, 5, 5)], 8, 8)
    batch = collate_targets([t])
    heat = batch.heatmap.clone()
    out = DetectionOutputs(heat, torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 8, 8))
    rep = detection_loss(out, batch)
    assert rep.L_off.item() == pytest.approx(1.0)
    assert rep.L_det.item() == pytest.approx(rep.L_k.item() + 0.1 * rep.L_size.item() + 1.0)


def test_detection_loss_rejects_shape_mismatch():
    t = encode_targets([box(2, 2, 4, 4)], 8, 8)
    batch = collate_targets([t])
    with pytest.raises(ValueError):
        detection_loss(DetectionOutputs(torch.rand(1, 1, 4, 4), torch.rand(1, 2, 4, 4)), batch)
