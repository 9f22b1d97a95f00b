"""Glue between the toy world, the LiDAR feature path and the generator."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import no_grad
from .config import PipelineConfig
from .gan import Generator, Sample
from .grid import (Box3D, DenseGrid3D, PointCloud, ScaleDomain, SparseVoxelGrid, densify,
                   log_normalize, voxelize)
from .io import read_boxes, read_jsonl, read_points, read_tensor, write_boxes, write_jsonl, \
    write_points, write_tensor
from .obis import obis_augment
from .toyworld import generate_scene, lidar_sample, radar_truth, ray_grid


@dataclass
class Frame:
    name: str
    lidar: PointCloud
    boxes: list[Box3D]
    radar: DenseGrid3D | None = None
    split: str = "train"


def simulate_frame(cfg: PipelineConfig, index: int, split: str = "train") -> Frame:
    """One toy scene; every random draw is keyed by (config seed, index)."""
    seed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
    scene = generate_scene(cfg.scene_spec(seed))
    t = cfg.toyworld
    az, el = t.lidar_azimuth_deg, t.lidar_elevation_deg
    dirs = ray_grid((az[0], az[1], az[2]), (el[0], el[1], int(el[2])))
    pc = lidar_sample(scene, dirs=dirs, range_noise=t.range_noise, seed=seed)
    radar = radar_truth(scene, cfg.radar_forward(), cfg.roi_bounds(), cfg.resolutions.radar,
                        seed=seed)
    # store at file precision so in-memory and on-disk pipelines agree bitwise
    pc = PointCloud(pc.xyz.astype(np.float32).astype(np.float64),
                    pc.intensity.astype(np.float32).astype(np.float64))
    radar.values = radar.values.astype(np.float32).astype(np.float64)
    return Frame(f"scene_{index:04d}", pc, scene.boxes, radar, split)


def toy_frames(cfg: PipelineConfig, n: int | None = None) -> list[Frame]:
    """The configured toy dataset; the last ``n_val`` scenes form the held-out split."""
    n = cfg.toyworld.n_scenes if n is None else n
    n_train = n - min(cfg.toyworld.n_val, n)
    return [simulate_frame(cfg, i, "train" if i < n_train else "val") for i in range(n)]


def with_obis(frame: Frame, cfg: PipelineConfig) -> Frame:
    """OBIS-augmented frame; with ``obis.enabled`` off only the zero channels are added,
    so both variants share one input schema."""
    boxes = frame.boxes if cfg.obis.enabled else []
    pc = obis_augment(frame.lidar, boxes, cfg.obis_config())
    pc = PointCloud(pc.xyz.astype(np.float32).astype(np.float64),
                    pc.intensity.astype(np.float32).astype(np.float64),
                    pc.aux.astype(np.float32).astype(np.float64), pc.channels)
    return Frame(frame.name, pc, frame.boxes, frame.radar, frame.split)


def radar_target(radar: DenseGrid3D, v_ref: float | None) -> np.ndarray:
    """Log-normalized float32 target shaped (X, Y, Z, 1)."""
    if radar.scale_domain == ScaleDomain.RAW_POWER:
        radar = log_normalize(radar, v_ref)
    return radar.values.astype(np.float32)[..., None]


def lidar_input(pc: PointCloud, cfg: PipelineConfig) -> tuple[SparseVoxelGrid, np.ndarray]:
    """Sparse generator input and the dense condition at radar resolution."""
    svg = voxelize(pc, cfg.roi_bounds(), cfg.resolutions.lidar)
    factor = int(round(cfg.resolutions.radar / cfg.resolutions.lidar))
    cond, _ = densify(svg, factor)
    return svg, cond.astype(np.float32)


def make_sample(frame: Frame, cfg: PipelineConfig) -> Sample:
    svg, cond = lidar_input(frame.lidar, cfg)
    return Sample(svg, cond, radar_target(frame.radar, cfg.metrics.v_ref), frame.name)


def synthesize(G: Generator, pc: PointCloud, cfg: PipelineConfig) -> DenseGrid3D:
    svg, _ = lidar_input(pc, cfg)
    with no_grad():
        out = G(svg).value[..., 0]
    return DenseGrid3D(cfg.roi_bounds().origin, cfg.resolutions.radar, out.astype(np.float64),
                       ScaleDomain.LOG_NORMALIZED)


# ---------------------------------------------------------------------------
# blur baseline


def blur_baseline(sample: Sample, sigma: float = 1.0) -> np.ndarray:
    """Occupancy at radar resolution, Gaussian-blurred, scaled by the
    least-squares amplitude against the sample's own target."""
    occ = gaussian_filter(sample.condition[..., 0].astype(np.float64), sigma, mode="constant")
    y = sample.target[..., 0].astype(np.float64)
    denom = float(np.sum(occ * occ))
    a = float(np.sum(occ * y)) / denom if denom > 0 else 0.0
    return (a * occ)[..., None]


# ---------------------------------------------------------------------------
# on-disk datasets


def write_frames(frames, out_dir) -> Path:
    """Write LPC1 / box JSONL / RDT1 files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rows = []
    for f in frames:
        row = {"lidar": f"frames/{f.name}.lpc", "boxes": f"frames/{f.name}.boxes.jsonl",
               "radar": None, "split": f.split}
        write_points(out / row["lidar"], f.lidar)
        write_boxes(out / row["boxes"], f.boxes)
        if f.radar is not None:
            row["radar"] = f"frames/{f.name}.rdt"
            write_tensor(out / row["radar"], f.radar)
        rows.append(row)
    path = out / "manifest.jsonl"
    write_jsonl(path, rows)
    return path


def read_manifest(path) -> list[Frame]:
    path = Path(path)
    base = path.parent
    frames = []
    for row in read_jsonl(path):
        radar = read_tensor(base / row["radar"]) if row.get("radar") else None
        name = Path(row["lidar"]).name.split(".")[0]
        frames.append(Frame(name, read_points(base / row["lidar"]),
                            read_boxes(base / row["boxes"]), radar, row.get("split", "train")))
    return frames


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
