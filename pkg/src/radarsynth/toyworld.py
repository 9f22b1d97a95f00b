"""Procedural paired LiDAR/radar scenes.

Scenes are boxes on a flat ground plane plus optional vertical walls.  LiDAR
is simulated by first-hit ray casting; the radar ground truth comes from
dense surface sampling, a range-power law, a separable Gaussian PSF applied
in polar space, polar-to-Cartesian resampling, a clutter floor and optional
multiplicative speckle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .grid import (Box3D, DenseGrid3D, PointCloud, PolarGrid3D, RoiBounds, polar_fov_mask,
                   polar_to_cartesian, to_polar)
from .metrics import CLASS_DIM_RANGES, bev_intersection

LIDAR_INTENSITY = {"Sedan": 0.8, "BusTruck": 0.6, "ground": 0.3, "wall": 0.5}


@dataclass
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]
    height: float


@dataclass
class Scene:
    boxes: list[Box3D]
    ground_z: float | None = -1.7
    walls: list[Wall] = field(default_factory=list)


@dataclass
class SceneSpec:
    seed: int = 0
    object_count: tuple[int, int] = (1, 4)
    class_mix: dict = field(default_factory=lambda: {"Sedan": 0.8, "BusTruck": 0.2})
    roi: RoiBounds = field(default_factory=lambda: RoiBounds(0.0, 19.2, -9.6, 9.6, -2.0, 1.2))
    ground_z: float = -1.7
    walls: tuple[int, int] = (0, 2)
    min_range: float = 3.0
    max_attempts: int = 50


def generate_scene(spec: SceneSpec) -> Scene:
    """Random non-overlapping boxes fully inside the ROI footprint."""
    rng = np.random.default_rng(spec.seed)
    roi = spec.roi
    labels = list(spec.class_mix)
    probs = np.array([spec.class_mix[k] for k in labels], dtype=np.float64)
    probs /= probs.sum()
    target = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    boxes: list[Box3D] = []
    for _ in range(target):
        label = labels[int(rng.choice(len(labels), p=probs))]
        dims = np.array([rng.uniform(*r) for r in CLASS_DIM_RANGES[label]])
        for _ in range(spec.max_attempts):
            x = rng.uniform(max(roi.x_min, spec.min_range), roi.x_max)
            y = rng.uniform(roi.y_min, roi.y_max)
            yaw = rng.uniform(-math.pi, math.pi)
            box = Box3D([x, y, spec.ground_z + dims[2] / 2], dims, yaw, label)
            c = box.corners_bev()
            inside = (c[:, 0].min() >= roi.x_min and c[:, 0].max() <= roi.x_max
                      and c[:, 1].min() >= roi.y_min and c[:, 1].max() <= roi.y_max)
            if inside and all(bev_intersection(box, b) == 0.0 for b in boxes):
                boxes.append(box)
                break
    walls = []
    for _ in range(int(rng.integers(spec.walls[0], spec.walls[1] + 1))):
        side = roi.y_max - 0.2 if rng.random() < 0.5 else roi.y_min + 0.2
        x0 = rng.uniform(roi.x_min + 2.0, roi.x_max - 6.0)
        x1 = min(roi.x_max, x0 + rng.uniform(4.0, 12.0))
        walls.append(Wall((x0, side), (x1, side), float(rng.uniform(1.0, 2.5))))
    return Scene(boxes, spec.ground_z, walls)


# ---------------------------------------------------------------------------
# LiDAR


def ray_grid(az_deg=(-90.0, 90.0, 0.25), el_deg=(-25.0, 5.0, 32)) -> np.ndarray:
    """Unit ray directions: azimuth (start, stop, step) x elevation (lo, hi, beams)."""
    az = np.deg2rad(np.arange(az_deg[0], az_deg[1] + 1e-9, az_deg[2]))
    el = np.deg2rad(np.linspace(el_deg[0], el_deg[1], int(el_deg[2])))
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)


def ray_box(origin: np.ndarray, dirs: np.ndarray, box: Box3D):
    """Slab-method entry distance (inf on miss) and world-frame entry normal."""
    R = box.rotation()
    o = (origin - box.center) @ R
    d = dirs @ R
    half = box.dims / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    t_in = near.max(axis=1)
    t_out = far.min(axis=1)
    hit = (t_in <= t_out) & (t_in > 0)
    axis = near.argmax(axis=1)
    n_local = np.zeros_like(d)
    rows = np.arange(len(d))
    n_local[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, t_in, np.inf), n_local @ R.T


def ray_wall(origin, dirs, wall: Wall, ground_z: float):
    p0 = np.array([*wall.start, 0.0])
    p1 = np.array([*wall.end, 0.0])
    seg = p1 - p0
    n = np.array([-seg[1], seg[0], 0.0])
    n /= np.linalg.norm(n)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - origin) @ n) / denom
    ok = np.isfinite(t)
    t = np.where(ok, t, 0.0)
    p = origin + t[:, None] * dirs
    s = ((p - p0) @ seg) / (seg @ seg)
    ok &= (t > 0) & (s >= 0) & (s <= 1) & (p[:, 2] >= ground_z) & (p[:, 2] <= ground_z + wall.height)
    normal = np.where((denom > 0)[:, None], -n, n)
    return np.where(ok, t, np.inf), normal


def cast_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """First-hit distance, surface normal and material label for every ray."""
    best = np.full(len(dirs), np.inf)
    normal = np.zeros_like(dirs)
    material = np.full(len(dirs), "", dtype=object)
    if scene.ground_z is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_z - origin[2]) / dirs[:, 2]
        t = np.where((dirs[:, 2] < 0) & np.isfinite(t), t, np.inf)
        upd = t < best
        best[upd], normal[upd], material[upd] = t[upd], (0.0, 0.0, 1.0), "ground"
    for w in scene.walls:
        t, n = ray_wall(origin, dirs, w, scene.ground_z if scene.ground_z is not None else -1e9)
        upd = t < best
        best[upd], normal[upd], material[upd] = t[upd], n[upd], "wall"
    for b in scene.boxes:
        t, n = ray_box(origin, dirs, b)
        upd = t < best
        best[upd], normal[upd], material[upd] = t[upd], n[upd], b.label
    return best, normal, material


def lidar_sample(scene: Scene, origin=(0.0, 0.0, 0.0), dirs: np.ndarray | None = None,
                 range_noise: float = 0.02, seed: int = 0, max_range: float = 80.0) -> PointCloud:
    """Ray-cast point cloud; intensity is material base times |cos incidence|.

    Range noise is Gaussian with standard deviation ``range_noise``, truncated
    at three standard deviations.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = ray_grid() if dirs is None else np.asarray(dirs, dtype=np.float64)
    t, normal, material = cast_rays(scene, origin, dirs)
    ok = np.isfinite(t) & (t <= max_range)
    t, normal, material, d = t[ok], normal[ok], material[ok], dirs[ok]
    rng = np.random.default_rng(seed)
    if range_noise > 0:
        # truncated at 3 sigma so every return stays within 3 sigma of its surface
        t = t + np.clip(rng.normal(0.0, range_noise, size=len(t)), -3 * range_noise,
                        3 * range_noise)
    base = np.array([LIDAR_INTENSITY.get(m, 0.5) for m in material])
    cos_inc = np.abs(np.sum(normal * d, axis=1))
    return PointCloud(origin + t[:, None] * d, base * cos_inc)


# ---------------------------------------------------------------------------
# radar forward model


@dataclass
class RadarForwardConfig:
    range_exponent: float = 2.0
    sigma_range: float = 0.3
    sigma_azimuth_deg: float = 1.2
    sigma_elevation_deg: float = 2.0
    clutter_floor: float = 1e7
    speckle: bool = False
    rcs: dict = field(default_factory=lambda: {"Sedan": 10.0, "BusTruck": 20.0, "ground": 0.05,
                                               "wall": 1.0})
    diffuse: float = 0.3
    power_scale: float = 3e15
    sample_spacing: float = 0.1
    ground_spacing: float = 0.2
    range_bins: tuple = (0.0, 0.2, 151)
    azimuth_bins_deg: tuple = (-90.0, 1.0, 181)
    elevation_bins_deg: tuple = (-90.0, 2.0, 91)
    supersample: int = 4

    def __post_init__(self):
        if min(self.sigma_range, self.sigma_azimuth_deg, self.sigma_elevation_deg) <= 0:
            raise ValueError("PSF sigmas must be positive")
        if self.range_exponent < 0:
            raise ValueError("range exponent must be non-negative")

    def empty_polar(self) -> PolarGrid3D:
        az, el = self.azimuth_bins_deg, self.elevation_bins_deg
        return PolarGrid3D(tuple(self.range_bins),
                           (math.radians(az[0]), math.radians(az[1]), int(az[2])),
                           (math.radians(el[0]), math.radians(el[1]), int(el[2])))


def _face_grid(corner, u_vec, v_vec, spacing):
    lu, lv = np.linalg.norm(u_vec), np.linalg.norm(v_vec)
    nu, nv = max(1, math.ceil(lu / spacing)), max(1, math.ceil(lv / spacing))
    su = (np.arange(nu) + 0.5) / nu
    sv = (np.arange(nv) + 0.5) / nv
    gu, gv = np.meshgrid(su, sv, indexing="ij")
    pts = corner + gu.reshape(-1, 1) * u_vec + gv.reshape(-1, 1) * v_vec
    return pts, np.full(len(pts), lu * lv / (nu * nv))


def surface_scatterers(scene: Scene, roi: RoiBounds, fwd: RadarForwardConfig,
                       origin=np.zeros(3)):
    """Sample positions and per-sample RCS (reflectivity x area x aspect gain)."""
    pos, rcs = [], []

    def emit(pts, area, normal, rho):
        to_sensor = origin - pts
        to_sensor /= np.linalg.norm(to_sensor, axis=1, keepdims=True)
        cos = np.clip(to_sensor @ normal, 0.0, None)
        gain = fwd.diffuse + (1 - fwd.diffuse) * cos
        pos.append(pts)
        rcs.append(rho * area * gain)

    for b in scene.boxes:
        half = b.dims / 2
        rho = fwd.rcs.get(b.label, 1.0)
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            for sign in (-1.0, 1.0):
                corner = np.zeros(3)
                corner[axis] = sign * half[axis]
                corner[u], corner[v] = -half[u], -half[v]
                eu, ev = np.zeros(3), np.zeros(3)
                eu[u], ev[v] = b.dims[u], b.dims[v]
                pts, area = _face_grid(corner, eu, ev, fwd.sample_spacing)
                n = np.zeros(3)
                n[axis] = sign
                emit(b.to_world(pts), area, b.rotation() @ n, rho)
    if scene.ground_z is not None:
        corner = np.array([roi.x_min, roi.y_min, scene.ground_z])
        pts, area = _face_grid(corner, np.array([roi.x_max - roi.x_min, 0, 0]),
                               np.array([0, roi.y_max - roi.y_min, 0]), fwd.ground_spacing)
        emit(pts, area, np.array([0.0, 0.0, 1.0]), fwd.rcs.get("ground", 0.05))
    for w in scene.walls:
        gz = scene.ground_z if scene.ground_z is not None else roi.z_min
        p0 = np.array([*w.start, gz])
        seg = np.array([w.end[0] - w.start[0], w.end[1] - w.start[1], 0.0])
        pts, area = _face_grid(p0, seg, np.array([0, 0, w.height]), fwd.sample_spacing)
        n = np.array([-seg[1], seg[0], 0.0]) / np.linalg.norm(seg)
        if n @ (origin - p0) < 0:
            n = -n
        emit(pts, area, n, fwd.rcs.get("wall", 1.0))
    if not pos:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(pos), np.concatenate(rcs)


def deposit_polar(positions: np.ndarray, rcs: np.ndarray, fwd: RadarForwardConfig,
                  origin=np.zeros(3)) -> PolarGrid3D:
    """Add ``power_scale * rcs / r**alpha`` of each sample to its nearest polar bin."""
    pg = fwd.empty_polar()
    if len(positions) == 0:
        return pg
    rae = to_polar(np.asarray(positions) - origin)
    idx = []
    inside = np.ones(len(rae), dtype=bool)
    for a, (start, step, n) in enumerate((pg.range_bins, pg.azimuth_bins, pg.elevation_bins)):
        i = np.rint((rae[:, a] - start) / step).astype(np.int64)
        inside &= (i >= 0) & (i < n)
        idx.append(i)
    power = fwd.power_scale * rcs / np.maximum(rae[:, 0], 1e-6) ** fwd.range_exponent
    flat = np.ravel_multi_index([i[inside] for i in idx], pg.values.shape)
    pg.values = np.bincount(flat, weights=power[inside], minlength=pg.values.size
                            ).reshape(pg.values.shape)
    return pg


def psf_blur(pg: PolarGrid3D, fwd: RadarForwardConfig) -> PolarGrid3D:
    sig = [fwd.sigma_range / pg.range_bins[1],
           math.radians(fwd.sigma_azimuth_deg) / pg.azimuth_bins[1],
           math.radians(fwd.sigma_elevation_deg) / pg.elevation_bins[1]]
    v = pg.values
    for axis, s in enumerate(sig):
        v = gaussian_filter1d(v, s, axis=axis, mode="constant", cval=0.0, truncate=4.0)
    return PolarGrid3D(pg.range_bins, pg.azimuth_bins, pg.elevation_bins, v)


def polar_to_radar_grid(pg: PolarGrid3D, roi: RoiBounds, r_out: float, supersample: int
                        ) -> DenseGrid3D:
    """Resample at ``r_out / supersample`` and average down to ``r_out`` voxels."""
    fine = polar_to_cartesian(pg, roi, r_out / supersample)
    X, Y, Z = roi.dims(r_out)
    s = supersample
    vals = fine.values.reshape(X, s, Y, s, Z, s).mean(axis=(1, 3, 5))
    return DenseGrid3D(roi.origin, r_out, vals)


def radar_from_scatterers(positions, rcs, fwd: RadarForwardConfig, roi: RoiBounds, r_out: float,
                          seed: int = 0, origin=np.zeros(3)) -> DenseGrid3D:
    pg = psf_blur(deposit_polar(positions, rcs, fwd, origin), fwd)
    grid = polar_to_radar_grid(pg, roi, r_out, fwd.supersample)
    fov = polar_fov_mask(pg, to_polar(grid.centers() - origin))
    vals = np.maximum(grid.values, 0.0) + fwd.clutter_floor * fov
    if fwd.speckle:
        vals = vals * np.random.default_rng(seed).exponential(1.0, size=vals.shape)
    grid.values = vals
    return grid


def radar_truth(scene: Scene, fwd: RadarForwardConfig, roi: RoiBounds, r_out: float,
                seed: int = 0) -> DenseGrid3D:
    pos, rcs = surface_scatterers(scene, roi, fwd)
    return radar_from_scatterers(pos, rcs, fwd, roi, r_out, seed)
