"""Ground-truth augmentation: an object bank of annotated LiDAR clusters and
collision-free insertion of bank objects into scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Box3D, PointCloud, RoiBounds
from .io import read_jsonl, read_points, write_jsonl, write_points
from .metrics import bev_intersection


@dataclass
class ObjectBankEntry:
    """Box normalized to the origin with yaw 0; points in that box frame."""

    box: Box3D
    points: PointCloud
    source_frame_id: str = ""

    def __post_init__(self):
        half = self.box.dims / 2 + 1e-6
        if len(self.points) and np.any(np.abs(self.points.xyz) > half):
            raise ValueError("bank entry points must lie inside the box")


def build_bank(frames, min_points: int = 5, frame_ids=None) -> list[ObjectBankEntry]:
    """``frames`` is a sequence of (PointCloud, boxes) pairs."""
    bank = []
    for i, (pc, boxes) in enumerate(frames):
        fid = frame_ids[i] if frame_ids is not None else str(i)
        for box in boxes:
            inside = box.contains(pc.xyz)
            if int(inside.sum()) < min_points:
                continue
            sel = pc.select(inside)
            local = box.to_local(sel.xyz)
            # float error at faces; membership already decided above
            local = np.clip(local, -box.dims / 2, box.dims / 2)
            norm = Box3D(np.zeros(3), box.dims.copy(), 0.0, box.label)
            bank.append(ObjectBankEntry(norm, PointCloud(local, sel.intensity, sel.aux,
                                                         sel.channels), fid))
    return bank


def _placed(entry: ObjectBankEntry, center: np.ndarray, yaw: float) -> Box3D:
    return Box3D(center, entry.box.dims.copy(), yaw, entry.box.label)


def insert_objects(pc: PointCloud, boxes, bank, n_insert: int, rng_seed: int,
                   roi: RoiBounds, ground_z: float = -1.7, max_attempts: int = 20):
    """Place up to ``n_insert`` bank objects at random ground poses.

    A candidate is rejected when its BEV rectangle overlaps any existing or
    already inserted box, or leaves the ROI footprint.  Returns
    ``(cloud, boxes, inserted_count)``.
    """
    if n_insert < 0:
        raise ValueError("n_insert must be >= 0")
    boxes = list(boxes)
    if n_insert == 0 or not bank:
        return pc, boxes, 0
    rng = np.random.default_rng(rng_seed)
    parts, placed = [pc], []
    for _ in range(n_insert):
        entry = bank[int(rng.integers(len(bank)))]
        for _ in range(max_attempts):
            x = rng.uniform(roi.x_min, roi.x_max)
            y = rng.uniform(roi.y_min, roi.y_max)
            yaw = float(rng.uniform(-math.pi, math.pi))
            center = np.array([x, y, ground_z + entry.box.dims[2] / 2])
            cand = _placed(entry, center, yaw)
            corners = cand.corners_bev()
            if (corners[:, 0].min() < roi.x_min or corners[:, 0].max() > roi.x_max
                    or corners[:, 1].min() < roi.y_min or corners[:, 1].max() > roi.y_max):
                continue
            if any(bev_intersection(cand, b) > 0 for b in boxes + placed):
                continue
            placed.append(cand)
            pts = entry.points
            parts.append(PointCloud(cand.to_world(pts.xyz), pts.intensity, pts.aux,
                                    pts.channels))
            break
    if not placed:
        return pc, boxes, 0
    schema = list(pc.channels)
    for p in parts[1:]:
        schema += [c for c in p.channels if c not in schema]
    cloud = PointCloud.concat([p.conform(schema) for p in parts])
    return cloud, boxes + placed, len(placed)


def write_bank(bank, out_dir) -> Path:
    """Bank directory: one LPC1 file per entry plus ``index.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, e in enumerate(bank):
        name = f"entry_{i:05d}.lpc"
        write_points(out / name, e.points)
        rows.append({"points": name, "box": e.box.to_dict(), "source_frame_id": e.source_frame_id})
    path = out / "index.jsonl"
    write_jsonl(path, rows)
    return path


def read_bank(bank_dir) -> list[ObjectBankEntry]:
    base = Path(bank_dir)
    return [ObjectBankEntry(Box3D.from_dict(r["box"]), read_points(base / r["points"]),
                            r.get("source_frame_id", ""))
            for r in read_jsonl(base / "index.jsonl")]
