import math

import numpy as np
import pytest

from radarsynth.grid import Box3D, PointCloud, RoiBounds
from radarsynth.gtaug import ObjectBankEntry, build_bank, insert_objects, read_bank, write_bank
from radarsynth.io import encode_points
from radarsynth.metrics import bev_iou

ROI = RoiBounds(0.0, 19.2, -9.6, 9.6, -2.0, 1.2)


def _cloud(xyz, channels=()):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    return PointCloud(xyz, np.linspace(0, 1, len(xyz)), np.zeros((len(xyz), len(channels))),
                      channels)


def _scene(seed=0):
    rng = np.random.default_rng(seed)
    boxes = [Box3D([6, -3, -1.0], [4.2, 1.8, 1.4], 0.4, "Sedan"),
             Box3D([12, 4, -0.4], [8.0, 2.5, 2.6], -1.2, "BusTruck")]
    pts = [b.to_world(rng.uniform(-0.45, 0.45, (30, 3)) * b.dims) for b in boxes]
    pts.append(rng.uniform([0, -9, -2], [19, 9, 1], (200, 3)))
    return _cloud(np.concatenate(pts), ("edge",)), boxes


def _bank(seed=0):
    pc, boxes = _scene(seed)
    return build_bank([(pc, boxes)], frame_ids=["f0"])


def test_build_bank_counts_and_threshold():
    box = Box3D([5, 1, -1], [4, 2, 1.5], 0.7, "Sedan")
    pc = _cloud(box.to_world(np.random.default_rng(0).uniform(-0.4, 0.4, (10, 3)) * box.dims))
    bank = build_bank([(pc, [box])])
    assert len(bank) == 1 and len(bank[0].points) == 10
    assert bank[0].box.yaw == 0.0 and np.all(bank[0].box.center == 0)
    assert build_bank([(pc.select(np.arange(10) < 3), [box])]) == []


def test_build_bank_membership_matches_oracle():
    pc, boxes = _scene(3)
    bank = build_bank([(pc, boxes)])
    for box, entry in zip(boxes, bank):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        d = pc.xyz - box.center
        local = np.stack([d[:, 0] * c + d[:, 1] * s, -d[:, 0] * s + d[:, 1] * c, d[:, 2]], 1)
        inside = np.all(np.abs(local) <= box.dims / 2 + 1e-9, axis=1)
        assert len(entry.points) == int(inside.sum())
        np.testing.assert_allclose(entry.points.xyz, local[inside], atol=1e-9)


def test_entry_rejects_outside_points():
    with pytest.raises(ValueError):
        ObjectBankEntry(Box3D([0, 0, 0], [1, 1, 1]), _cloud([[0.6, 0, 0]]))


def test_zero_insert_is_identity():
    pc, boxes = _scene()
    out, out_boxes, n = insert_objects(pc, boxes, _bank(), 0, 1, ROI)
    assert out is pc and out_boxes == boxes and n == 0
    with pytest.raises(ValueError):
        insert_objects(pc, boxes, _bank(), -1, 1, ROI)


def test_empty_scene_single_insert():
    bank = _bank()[:1]
    out, boxes, n = insert_objects(PointCloud.empty(), [], bank, 1, 4, ROI)
    assert n == 1 and len(boxes) == 1
    assert len(out) == len(bank[0].points)
    b = boxes[0]
    assert b.center[2] - b.dims[2] / 2 == pytest.approx(-1.7, abs=1e-12)
    assert np.all(np.abs(b.corners_bev()[:, 1]) <= 9.6)


def test_full_occupancy_scene_rejects_everything():
    # one huge box covering the ROI footprint collides with every candidate
    wall = Box3D([9.6, 0, 0], [19.2, 19.2, 4.0], 0.0, "BusTruck")
    pc = _cloud([[1, 1, 0], [2, 2, 0]])
    out, boxes, n = insert_objects(pc, [wall], _bank(), 5, 0, ROI)
    assert n == 0 and boxes == [wall]
    assert encode_points(out) == encode_points(pc)


def test_inserted_boxes_never_overlap():
    pc, boxes = _scene()
    bank = _bank()
    for seed in range(20):
        _, out_boxes, n = insert_objects(pc, boxes, bank, 4, seed, ROI)
        new = out_boxes[len(boxes):]
        assert len(new) == n
        for i, a in enumerate(new):
            for b in out_boxes:
                if b is not a:
                    assert bev_iou(a, b) == 0.0


def test_inverse_pose_recovers_bank_points():
    bank = _bank()
    pc, boxes = _scene()
    out, out_boxes, n = insert_objects(pc, boxes, bank, 2, 9, ROI)
    assert n >= 1
    rng = np.random.default_rng(9)
    start = len(pc)
    for box in out_boxes[len(boxes):]:
        entry = bank[int(rng.integers(len(bank)))]
        while not np.allclose(entry.box.dims, box.dims):
            entry = bank[int(rng.integers(len(bank)))]
        m = len(entry.points)
        np.testing.assert_allclose(box.to_local(out.xyz[start:start + m]), entry.points.xyz,
                                   atol=1e-9)
        start += m


def test_channel_schema_is_merged():
    pc = _cloud([[1, 1, 0]], ("edge",))
    src = _cloud(Box3D([5, 0, -1], [4, 2, 1.5]).to_world(np.zeros((6, 3))), ("cls_Sedan",))
    bank = build_bank([(src, [Box3D([5, 0, -1], [4, 2, 1.5], 0.0, "Sedan")])])
    out, _, n = insert_objects(pc, [], bank, 1, 0, ROI)
    assert n == 1 and out.channels == ("edge", "cls_Sedan")


def test_seeded_determinism_bitwise():
    pc, boxes = _scene()
    bank = _bank()
    a = insert_objects(pc, boxes, bank, 3, 123, ROI)
    b = insert_objects(pc, boxes, bank, 3, 123, ROI)
    assert encode_points(a[0]) == encode_points(b[0])
    assert [x.to_dict() for x in a[1]] == [x.to_dict() for x in b[1]]


def test_bank_round_trip(tmp_path):
    bank = _bank()
    write_bank(bank, tmp_path / "bank")
    back = read_bank(tmp_path / "bank")
    assert len(back) == len(bank)
    for e, f in zip(bank, back):
        assert e.source_frame_id == f.source_frame_id and e.box.label == f.box.label
        np.testing.assert_array_equal(f.points.xyz, e.points.xyz.astype(np.float32))
    write_bank(back, tmp_path / "again")
    for name in ["index.jsonl", "entry_00000.lpc", "entry_00001.lpc"]:
        assert (tmp_path / "bank" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
