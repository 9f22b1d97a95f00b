import math
from fractions import Fraction

import numpy as np
import pytest
from oracles import mc_bev_iou, mc_iou_3d, psnr_oracle, random_box_pair, ssim_oracle

from radarsynth.grid import Box3D, DenseGrid3D, ScaleDomain
from radarsynth.metrics import (DetectionRecord, average_precision, bev_iou, bev_scores,
                                center_shift_study, iou_3d, metric_bev, psnr, ssim)


def test_psnr_analytic():
    a = np.zeros((4, 5))
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full((4, 5), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, np.full((4, 5), 0.5), max_val=2.0) == pytest.approx(10 * math.log10(16), abs=1e-9)


def test_psnr_random_matches_oracle_and_is_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.random((16, 12)), rng.random((16, 12))
    assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-9)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, b[:-1])


def test_ssim_identical_and_zero_variance():
    rng = np.random.default_rng(1)
    a = rng.random((14, 13))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01 ** 2
    for ma, mb in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0)]:
        want = (2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1)
        got = ssim(np.full((12, 12), ma), np.full((12, 12), mb))
        assert got == pytest.approx(want, abs=1e-9)


def test_ssim_matches_windowed_oracle():
    rng = np.random.default_rng(2)
    for shape in [(11, 11), (15, 19), (24, 16)]:
        a = rng.random(shape)
        b = np.clip(a + rng.normal(0, 0.2, shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_bev_scores_shapes_and_nan_ssim():
    rng = np.random.default_rng(3)
    a, b = rng.random((12, 12, 3, 1)), rng.random((12, 12, 3))
    p, s = bev_scores(a, b)
    assert p == pytest.approx(psnr(a[..., 0].mean(axis=2), b.mean(axis=2)))
    assert s == pytest.approx(ssim(a[..., 0].mean(axis=2), b.mean(axis=2)))
    assert math.isnan(bev_scores(a[:4, :4], b[:4, :4])[1])


def test_metric_bev_orders():
    v = np.zeros((2, 2, 2))
    v[0, 0, 0] = 9e13
    g = DenseGrid3D(np.zeros(3), 0.4, v, ScaleDomain.RAW_POWER)
    # per voxel: log10(1 + 9) / 1 = 1, pooled over 2 -> 0.5
    np.testing.assert_allclose(metric_bev(g, v_ref=1e13)[0, 0], 0.5)
    pooled = metric_bev(g, v_ref=1e13, order="pool_then_normalize")
    np.testing.assert_allclose(pooled[0, 0], 1.0)
    with pytest.raises(ValueError):
        metric_bev(g, order="pool_first")


def test_iou_trivial_cases():
    b = Box3D([1, 2, 0], [4, 2, 1.5], 0.3)
    assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)
    assert bev_iou(b, Box3D([20, 2, 0], [4, 2, 1.5], 0.3)) == 0.0
    # identical boxes offset by half their height
    up = Box3D([1, 2, 0.75], [4, 2, 1.5], 0.3)
    assert iou_3d(b, up) == pytest.approx(1 / 3, abs=1e-9)
    assert bev_iou(b, up) == pytest.approx(1.0, abs=1e-12)


def test_iou_axis_aligned_closed_form():
    a = Box3D([0, 0, 0], [2, 2, 2])
    b = Box3D([1, 0.5, 0], [2, 2, 2])
    # overlap 1 x 1.5 in BEV
    assert bev_iou(a, b) == pytest.approx(1.5 / (8 - 1.5), abs=1e-12)


def test_iou_matches_monte_carlo():
    rng = np.random.default_rng(4)
    for k in range(15):
        b1, b2 = random_box_pair(rng, Box3D)
        assert abs(bev_iou(b1, b2) - mc_bev_iou(b1, b2, 200_000, k)) < 0.01
        assert abs(iou_3d(b1, b2) - mc_iou_3d(b1, b2, 200_000, k)) < 0.01


def test_iou_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(5)
    for _ in range(30):
        b1, b2 = random_box_pair(rng, Box3D)
        assert bev_iou(b1, b2) == pytest.approx(bev_iou(b2, b1), abs=1e-12)
        assert iou_3d(b1, b2) == pytest.approx(iou_3d(b2, b1), abs=1e-12)
        th, t = rng.uniform(-math.pi, math.pi), rng.uniform(-10, 10, size=3)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        m1, m2 = (Box3D(rot @ b.center + t, b.dims, b.yaw + th) for b in (b1, b2))
        assert bev_iou(m1, m2) == pytest.approx(bev_iou(b1, b2), abs=1e-9)
        assert iou_3d(m1, m2) == pytest.approx(iou_3d(b1, b2), abs=1e-9)
        assert 0.0 <= bev_iou(b1, b2) <= 1.0


def _det(frame, x, score, y=0.0):
    return DetectionRecord(frame, Box3D([x, y, 0], [4, 2, 1.5]), score)


def _gt(*xs):
    return [Box3D([x, 0, 0], [4, 2, 1.5]) for x in xs]


AP_CASES = [
    # one perfect detection
    ([_det("a", 0, 0.9)], {"a": _gt(0)}, 1.0),
    # one detection that misses
    ([_det("a", 30, 0.9)], {"a": _gt(0)}, 0.0),
    # TP, FP, TP over two GTs: precision 1 up to recall 1/2, then 2/3
    ([_det("a", 0, 0.9), _det("a", 50, 0.8), _det("a", 10, 0.7)], {"a": _gt(0, 10)},
     float((20 + 20 * Fraction(2, 3)) / 40)),
    # FP, TP, TP over three GTs: best precision 2/3 reaches recall 2/3 (26 of 40 points)
    ([_det("a", 50, 0.9), _det("a", 0, 0.8), _det("a", 10, 0.6)], {"a": _gt(0, 10, 20)},
     float(26 * Fraction(2, 3) / 40)),
    # score tie broken by frame id: the TP in frame "a" ranks before the FP in "b"
    ([_det("b", 60, 0.5), _det("a", 0, 0.5)], {"a": _gt(0), "b": _gt(0)}, 20 / 40),
]


@pytest.mark.parametrize("dets,gts,want", AP_CASES)
def test_ap_hand_computed(dets, gts, want):
    assert average_precision(dets, gts) == want


def test_ap_duplicate_detection_is_false_positive():
    dets = [_det("a", 0, 0.9), _det("a", 0.1, 0.8)]
    assert average_precision(dets, {"a": _gt(0)}) == 1.0
    assert average_precision(dets, {"a": _gt(0, 30)}) == 0.5


def test_ap_invariant_under_monotone_score_map():
    rng = np.random.default_rng(6)
    gts = {f: _gt(*rng.uniform(0, 40, 3)) for f in "abc"}
    dets = [_det(f, rng.uniform(0, 40), rng.random(), rng.uniform(-1, 1)) for f in "abc"
            for _ in range(6)]
    mapped = [DetectionRecord(d.frame, d.box, d.score ** 3) for d in dets]
    assert average_precision(dets, gts) == average_precision(mapped, gts)
    assert average_precision(dets, gts, mode="3D") == average_precision(mapped, gts, mode="3D")


def test_detection_score_validation():
    with pytest.raises(ValueError):
        _det("a", 0, 1.5)
    with pytest.raises(ValueError):
        _det("a", 0, float("nan"))


def test_center_shift_limit_and_determinism():
    fine = center_shift_study(n=20, resolutions=(0.001,), seed=1)
    assert fine[0.001] < 0.005
    a = center_shift_study(n=30, seed=2)
    assert a == center_shift_study(n=30, seed=2)
    vals = [a[r] for r in (0.05, 0.1, 0.2, 0.4)]
    assert vals == sorted(vals)
