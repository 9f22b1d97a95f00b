"""Geometric data types and grid operations shared by every stage.

Coordinates are sensor-relative meters: +x forward, +y left, +z up.  Dense
grids use channels-last numpy arrays indexed ``[ix, iy, iz]`` so the flat
C-order index equals ``((ix * NY) + iy) * NZ + iz``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class GridError(ValueError):
    """Invalid parameter or input for a grid operation."""


class ScaleDomain(str, Enum):
    RAW_POWER = "raw_power"
    LOG_NORMALIZED = "log_normalized"


def _divisible(extent: float, resolution: float) -> int:
    n = extent / resolution
    k = int(round(n))
    if k <= 0 or abs(n - k) > 1e-6 * max(1.0, n):
        raise GridError(f"extent {extent} is not a multiple of resolution {resolution}")
    return k


@dataclass(frozen=True)
class RoiBounds:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for lo, hi in self.pairs():
            if not lo < hi:
                raise GridError(f"ROI axis has min {lo} >= max {hi}")

    def pairs(self) -> list[tuple[float, float]]:
        return [(self.x_min, self.x_max), (self.y_min, self.y_max), (self.z_min, self.z_max)]

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def extents(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.pairs()])

    def dims(self, resolution: float) -> tuple[int, int, int]:
        """Voxel counts along each axis; raises if an extent is not a multiple."""
        if resolution <= 0:
            raise GridError("resolution must be positive")
        return tuple(_divisible(hi - lo, resolution) for lo, hi in self.pairs())

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz)
        lo, hi = self.origin, self.origin + self.extents
        return np.all((xyz >= lo) & (xyz < hi), axis=-1)

    @classmethod
    def from_list(cls, values) -> "RoiBounds":
        return cls(*[float(v) for v in values])

    def to_list(self) -> list[float]:
        return [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max]


@dataclass
class PointCloud:
    """Points with intensity and a fixed list of auxiliary channels."""

    xyz: np.ndarray
    intensity: np.ndarray
    aux: np.ndarray = None
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.channels = tuple(self.channels)
        if self.aux is None:
            self.aux = np.zeros((n, len(self.channels)))
        self.aux = np.asarray(self.aux, dtype=np.float64).reshape(n, len(self.channels))

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, channels=()) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), None, tuple(channels))

    def validate(self) -> None:
        if not (np.all(np.isfinite(self.xyz)) and np.all(np.isfinite(self.intensity))
                and np.all(np.isfinite(self.aux))):
            raise GridError("point cloud contains non-finite values")

    def select(self, mask) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.intensity[mask], self.aux[mask], self.channels)

    def with_channels(self, names) -> "PointCloud":
        """Append zero-filled channels that are not already present."""
        new = [c for c in names if c not in self.channels]
        if not new:
            return self
        aux = np.concatenate([self.aux, np.zeros((len(self), len(new)))], axis=1)
        return PointCloud(self.xyz, self.intensity, aux, self.channels + tuple(new))

    def conform(self, names) -> "PointCloud":
        """Exactly the channels ``names`` in that order; missing ones are zero."""
        names = tuple(names)
        extra = set(self.channels) - set(names)
        if extra:
            raise GridError(f"channels {sorted(extra)} not in target schema")
        if names == self.channels:
            return self
        aux = np.zeros((len(self), len(names)))
        for j, name in enumerate(names):
            if name in self.channels:
                aux[:, j] = self.channel(name)
        return PointCloud(self.xyz, self.intensity, aux, names)

    def channel(self, name: str) -> np.ndarray:
        return self.aux[:, self.channels.index(name)]

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        schema = clouds[0].channels
        for c in clouds[1:]:
            if c.channels != schema:
                raise GridError("cannot concatenate clouds with different channel schemas")
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.aux for c in clouds]),
            schema,
        )


@dataclass
class SparseVoxelGrid:
    """Occupied voxels only; ``coords`` is sorted lexicographically and unique."""

    origin: np.ndarray
    resolution: float
    dims: tuple[int, int, int]
    coords: np.ndarray
    features: np.ndarray
    channels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.coords)

    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(int(v) for v in c): f for c, f in zip(self.coords, self.features)}


@dataclass
class DenseGrid3D:
    origin: np.ndarray
    resolution: float
    values: np.ndarray
    scale_domain: ScaleDomain = ScaleDomain.RAW_POWER

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.scale_domain = ScaleDomain(self.scale_domain)
        if self.values.ndim != 3:
            raise GridError("dense grid values must be 3D")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def centers(self) -> np.ndarray:
        """Voxel centers, shape (NX, NY, NZ, 3)."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.resolution
                for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class PolarGrid3D:
    """Power sampled on (range, azimuth, elevation) bin centers.

    Bin ``i`` along an axis sits at ``start + i * step``.  Angles in radians.
    """

    range_bins: tuple[float, float, int]
    azimuth_bins: tuple[float, float, int]
    elevation_bins: tuple[float, float, int]
    values: np.ndarray = None

    def __post_init__(self):
        shape = []
        for start, step, n in (self.range_bins, self.azimuth_bins, self.elevation_bins):
            if step <= 0 or n < 2:
                raise GridError("polar bins need positive step and at least 2 bins")
            shape.append(int(n))
        if self.values is None:
            self.values = np.zeros(shape)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != tuple(shape):
            raise GridError(f"polar values shape {self.values.shape} != {tuple(shape)}")

    def axes(self) -> list[np.ndarray]:
        return [s + np.arange(n) * d for s, d, n in
                (self.range_bins, self.azimuth_bins, self.elevation_bins)]


@dataclass
class Box3D:
    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    label: str = "Sedan"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(self.dims <= 0):
            raise GridError("box dims must be positive")
        self.yaw = wrap_angle(float(self.yaw))

    def rotation(self) -> np.ndarray:
        """Box-to-world rotation about +z."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local) @ self.rotation().T + self.center

    def to_local(self, world: np.ndarray) -> np.ndarray:
        return (np.asarray(world) - self.center) @ self.rotation()

    def contains(self, xyz: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = self.to_local(xyz)
        return np.all(np.abs(local) <= self.dims / 2 + margin, axis=-1)

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise BEV corners, shape (4, 2)."""
        hl, hw = self.dims[0] / 2, self.dims[1] / 2
        local = np.array([[hl, hw, 0], [-hl, hw, 0], [-hl, -hw, 0], [hl, -hw, 0]])
        return self.to_world(local)[:, :2]

    def to_dict(self) -> dict:
        return {"center": [float(v) for v in self.center], "dims": [float(v) for v in self.dims],
                "yaw": float(self.yaw), "class": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["dims"], d.get("yaw", 0.0), d.get("class", "Sedan"))


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


# ---------------------------------------------------------------------------
# operations


def voxel_feature_channels(channels) -> tuple[str, ...]:
    return ("occupancy", "intensity") + tuple(channels)


def voxelize(pc: PointCloud, roi: RoiBounds, resolution: float) -> SparseVoxelGrid:
    """Bin points into voxels; features are [1, mean intensity, mean aux...]."""
    pc.validate()
    dims = roi.dims(resolution)
    keep = roi.contains(pc.xyz)
    xyz, inten, aux = pc.xyz[keep], pc.intensity[keep], pc.aux[keep]
    idx = np.floor((xyz - roi.origin) / resolution).astype(np.int64)
    # floating error at the upper edge
    idx = np.minimum(idx, np.array(dims) - 1)
    nfeat = 2 + aux.shape[1]
    if len(idx) == 0:
        return SparseVoxelGrid(roi.origin, resolution, dims, np.zeros((0, 3), np.int64),
                               np.zeros((0, nfeat)), voxel_feature_channels(pc.channels))
    keys = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    vals = np.concatenate([inten[:, None], aux], axis=1)
    sums = np.zeros((len(uniq), vals.shape[1]))
    np.add.at(sums, inverse, vals)
    feats = np.concatenate([np.ones((len(uniq), 1)), sums / counts[:, None]], axis=1)
    return SparseVoxelGrid(roi.origin, resolution, dims, unravel(uniq, dims), feats,
                           voxel_feature_channels(pc.channels))


def unravel(keys: np.ndarray, dims) -> np.ndarray:
    return np.stack(np.unravel_index(keys, dims), axis=1).astype(np.int64)


def ravel(coords: np.ndarray, dims) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


def to_polar(xyz: np.ndarray) -> np.ndarray:
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    rho = np.hypot(x, y)
    return np.stack([np.sqrt(x * x + y * y + z * z), np.arctan2(y, x), np.arctan2(z, rho)], axis=-1)


def interpolate_polar(pg: PolarGrid3D, rae: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at (range, az, el) samples; 0 outside the grid."""
    rae = np.asarray(rae, dtype=np.float64)
    flat = rae.reshape(-1, 3)
    out = np.zeros(len(flat))
    fidx = np.empty_like(flat)
    inside = np.ones(len(flat), dtype=bool)
    for a, (start, step, n) in enumerate((pg.range_bins, pg.azimuth_bins, pg.elevation_bins)):
        f = (flat[:, a] - start) / step
        # tolerate rounding right at the outer bin centers
        f = np.where(np.abs(f) < 1e-9, 0.0, f)
        f = np.where(np.abs(f - (n - 1)) < 1e-9, n - 1, f)
        inside &= (f >= 0) & (f <= n - 1)
        fidx[:, a] = f
    f = fidx[inside]
    shape = np.array(pg.values.shape)
    i0 = np.minimum(np.floor(f).astype(np.int64), shape - 2)
    t = f - i0
    acc = np.zeros(len(f))
    v = pg.values
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                acc += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    out[inside] = acc
    return out.reshape(rae.shape[:-1])


def polar_fov_mask(pg: PolarGrid3D, rae: np.ndarray) -> np.ndarray:
    mask = np.ones(rae.shape[:-1], dtype=bool)
    for a, (start, step, n) in enumerate((pg.range_bins, pg.azimuth_bins, pg.elevation_bins)):
        lo, hi = start, start + (n - 1) * step
        mask &= (rae[..., a] >= lo - 1e-9 * step) & (rae[..., a] <= hi + 1e-9 * step)
    return mask


def polar_to_cartesian(pg: PolarGrid3D, roi: RoiBounds, resolution: float) -> DenseGrid3D:
    """Resample a polar power field onto Cartesian voxel centers (trilinear)."""
    grid = DenseGrid3D(roi.origin, resolution, np.zeros(roi.dims(resolution)))
    rae = to_polar(grid.centers())
    grid.values = interpolate_polar(pg, rae)
    return grid


def log_normalize(g: DenseGrid3D, v_ref: float | None = None) -> DenseGrid3D:
    """Map raw power to ``log10(1+v)/log10(1+v_ref)`` clamped to [0, 1].

    ``v_ref`` defaults to the grid maximum.
    """
    if g.scale_domain != ScaleDomain.RAW_POWER:
        raise GridError("log_normalize expects a raw_power grid")
    if v_ref is None:
        v_ref = float(g.values.max()) if g.values.size else 0.0
    if not v_ref > 0:
        raise GridError(f"v_ref must be positive, got {v_ref}")
    vals = np.clip(np.log1p(np.maximum(g.values, 0.0)) / math.log1p(v_ref), 0.0, 1.0)
    return replace(g, values=vals, scale_domain=ScaleDomain.LOG_NORMALIZED)


def log_denormalize(g: DenseGrid3D, v_ref: float) -> DenseGrid3D:
    if g.scale_domain != ScaleDomain.LOG_NORMALIZED:
        raise GridError("log_denormalize expects a log_normalized grid")
    if not v_ref > 0:
        raise GridError(f"v_ref must be positive, got {v_ref}")
    vals = np.expm1(np.asarray(g.values) * math.log1p(v_ref))
    return replace(g, values=vals, scale_domain=ScaleDomain.RAW_POWER)


def bev_mean_pool(g: DenseGrid3D | np.ndarray) -> np.ndarray:
    values = g.values if isinstance(g, DenseGrid3D) else np.asarray(g)
    return values.mean(axis=2)


def sparsify_count(k_percent: float, n: int) -> int:
    # round away float noise such as 0.07 * 100 = 7.000000000000001
    return int(math.ceil(round(k_percent * n / 100.0, 9)))


def percentile_sparsify(g: DenseGrid3D, k_percent: float) -> PointCloud:
    """Keep the top ``k_percent`` % of cells as points at the voxel centers.

    Ties are broken by ascending flat index, i.e. lexicographic (ix, iy, iz).
    """
    if not 0 < k_percent <= 100:
        raise GridError(f"k_percent must be in (0, 100], got {k_percent}")
    if g.scale_domain != ScaleDomain.RAW_POWER:
        raise GridError("percentile_sparsify expects a raw_power grid")
    flat = g.values.reshape(-1)
    m = sparsify_count(k_percent, flat.size)
    order = np.argsort(-flat, kind="stable")[:m]
    order.sort()
    centers = g.centers().reshape(-1, 3)[order]
    return PointCloud(centers, flat[order])


def densify(svg: SparseVoxelGrid, factor: int) -> tuple[np.ndarray, float]:
    """Mean-pool occupied voxel features into a coarser dense grid.

    Returns ``(values, resolution)`` with values shaped (NX/f, NY/f, NZ/f, C);
    coarse cells without occupied fine voxels are zero.
    """
    factor = int(factor)
    if factor < 1 or any(d % factor for d in svg.dims):
        raise GridError(f"factor {factor} does not divide dims {svg.dims}")
    cdims = tuple(d // factor for d in svg.dims)
    nfeat = svg.features.shape[1] if svg.features.ndim == 2 else len(svg.channels)
    out = np.zeros(cdims + (nfeat,))
    if len(svg):
        keys = ravel(svg.coords // factor, cdims)
        uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        sums = np.zeros((len(uniq), nfeat))
        np.add.at(sums, inverse, svg.features)
        out.reshape(-1, nfeat)[uniq] = sums / counts[:, None]
    return out, svg.resolution * factor
