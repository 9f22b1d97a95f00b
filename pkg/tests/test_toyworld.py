import math

import numpy as np
import pytest
from oracles import ray_box_faces, sat_overlap

from radarsynth.grid import Box3D, RoiBounds, to_polar
from radarsynth.toyworld import (RadarForwardConfig, Scene, SceneSpec, deposit_polar,
                                 generate_scene, lidar_sample, psf_blur, radar_from_scatterers,
                                 radar_truth, ray_box, ray_grid, surface_scatterers)

ROI = RoiBounds(0.0, 19.2, -9.6, 9.6, -2.0, 1.2)


def test_scene_deterministic_and_count_in_range():
    for seed in range(10):
        spec = SceneSpec(seed=seed, object_count=(2, 5))
        a, b = generate_scene(spec), generate_scene(spec)
        assert [x.to_dict() for x in a.boxes] == [x.to_dict() for x in b.boxes]
        assert a.walls == b.walls
        assert 2 <= len(a.boxes) <= 5


def test_scene_boxes_inside_and_disjoint():
    for seed in range(30):
        boxes = generate_scene(SceneSpec(seed=seed, object_count=(3, 6))).boxes
        for i, b in enumerate(boxes):
            c = b.corners_bev()
            assert c[:, 0].min() >= ROI.x_min and c[:, 0].max() <= ROI.x_max
            assert c[:, 1].min() >= ROI.y_min and c[:, 1].max() <= ROI.y_max
            assert b.center[2] - b.dims[2] / 2 == pytest.approx(-1.7)
            for other in boxes[i + 1:]:
                assert not sat_overlap(c, other.corners_bev())


def test_lidar_single_box_hits_on_box():
    box = Box3D([8, 0, -0.95], [4.2, 1.8, 1.5], 0.5, "Sedan")
    sigma = 0.02
    pc = lidar_sample(Scene([box], ground_z=None), range_noise=sigma, seed=1)
    assert len(pc) > 50
    assert np.all(box.contains(pc.xyz, margin=3 * sigma))
    assert np.all((pc.intensity >= 0) & (pc.intensity <= 0.8 + 1e-12))


def test_lidar_empty_scene_only_ground():
    pc = lidar_sample(Scene([], ground_z=-1.7), range_noise=0.0)
    assert len(pc) > 0
    np.testing.assert_allclose(pc.xyz[:, 2], -1.7, atol=1e-9)
    assert np.all(pc.xyz[:, 2] < 0.0)


def test_ray_box_matches_face_oracle():
    rng = np.random.default_rng(2)
    dirs = ray_grid((-30, 30, 1.0), (-15, 5, 12))
    for _ in range(5):
        box = Box3D(rng.uniform([4, -3, -1.5], [12, 3, 0]), rng.uniform(1, 5, 3),
                    rng.uniform(-math.pi, math.pi))
        t, _ = ray_box(np.zeros(3), dirs, box)
        want = np.array([ray_box_faces(np.zeros(3), d, box) for d in dirs])
        assert np.array_equal(np.isinf(t), np.isinf(want))
        hit = np.isfinite(t)
        assert hit.any()
        np.testing.assert_allclose(t[hit], want[hit], atol=1e-6)


def test_lidar_pre_noise_ranges_match_oracle():
    box = Box3D([9, 1, -0.9], [4.5, 1.9, 1.6], -0.3, "Sedan")
    dirs = ray_grid((-20, 20, 0.5), (-10, 3, 8))
    pc = lidar_sample(Scene([box], ground_z=None), dirs=dirs, range_noise=0.0)
    want = np.array([ray_box_faces(np.zeros(3), d, box) for d in dirs])
    want = want[np.isfinite(want)]
    np.testing.assert_allclose(np.sort(np.linalg.norm(pc.xyz, axis=1)), np.sort(want), atol=1e-6)


def test_empty_scene_constant_clutter_in_fov():
    fwd = RadarForwardConfig(clutter_floor=5e6)
    g = radar_truth(Scene([], ground_z=None), fwd, ROI, 0.4)
    assert g.dims == (48, 48, 8)
    vals = np.unique(g.values)
    assert set(vals.tolist()) <= {0.0, 5e6}
    assert np.mean(g.values == 5e6) > 0.9


def test_point_target_argmax_at_voxel():
    fwd = RadarForwardConfig(clutter_floor=0.0)
    target = np.array([[10.2, -2.6, -0.6]])
    g = radar_from_scatterers(target, np.array([5.0]), fwd, ROI, 0.4)
    idx = np.unravel_index(np.argmax(g.values), g.dims)
    want = np.floor((target[0] - ROI.origin) / 0.4).astype(int)
    assert tuple(int(i) for i in idx) == tuple(want)


def test_deposited_power_matches_sum_oracle_and_is_linear():
    scene = generate_scene(SceneSpec(seed=4))
    fwd = RadarForwardConfig()
    pos, rcs = surface_scatterers(scene, ROI, fwd)
    pg = deposit_polar(pos, rcs, fwd)
    r = np.linalg.norm(pos, axis=1)
    rae = to_polar(pos)
    inside = ((r <= 150 * 0.2 + 0.1) & (np.abs(rae[:, 1]) <= math.radians(90.5))
              & (np.abs(rae[:, 2]) <= math.radians(91)))
    want = sum(fwd.power_scale * c / d ** 2 for c, d in zip(rcs[inside], r[inside]))
    assert pg.values.sum() == pytest.approx(want, rel=1e-6)
    doubled = deposit_polar(pos, 2 * rcs, fwd)
    np.testing.assert_allclose(doubled.values, 2 * pg.values, rtol=1e-12)


def test_psf_conserves_interior_power():
    fwd = RadarForwardConfig()
    pg = deposit_polar(np.array([[12.0, 1.0, -0.5]]), np.array([1.0]), fwd)
    blurred = psf_blur(pg, fwd)
    assert blurred.values.sum() == pytest.approx(pg.values.sum(), rel=1e-3)


def test_radar_truth_deterministic_without_speckle():
    scene = generate_scene(SceneSpec(seed=6))
    fwd = RadarForwardConfig()
    a = radar_truth(scene, fwd, ROI, 0.4, seed=1)
    b = radar_truth(scene, fwd, ROI, 0.4, seed=2)
    assert a.values.tobytes() == b.values.tobytes()
    s1 = radar_truth(scene, RadarForwardConfig(speckle=True), ROI, 0.4, seed=1)
    s2 = radar_truth(scene, RadarForwardConfig(speckle=True), ROI, 0.4, seed=1)
    assert s1.values.tobytes() == s2.values.tobytes()
    assert not np.array_equal(s1.values, a.values)


def test_forward_config_validation():
    with pytest.raises(ValueError):
        RadarForwardConfig(sigma_range=0.0)
    with pytest.raises(ValueError):
        RadarForwardConfig(range_exponent=-1.0)
