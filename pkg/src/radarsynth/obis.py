"""Object information supplement: box edge points and Gaussian shell points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Box3D, PointCloud

EDGE_CHANNEL = "edge"

# corner index bits: (x, y, z) sign selectors; edges join corners differing in one bit
_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


class ObisConfigError(ValueError):
    pass


@dataclass
class ObisConfig:
    edge_interval: float = 0.1
    shells: int = 4
    points_per_shell: int = 64
    shell_radii_fraction: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    class_channels: tuple[str, ...] = ("Sedan", "BusTruck")

    def __post_init__(self):
        self.shell_radii_fraction = tuple(float(f) for f in self.shell_radii_fraction)
        self.class_channels = tuple(self.class_channels)
        if not self.edge_interval > 0:
            raise ObisConfigError("edge_interval must be positive")
        radii = self.shell_radii_fraction
        if len(radii) != self.shells:
            raise ObisConfigError(f"{self.shells} shells but {len(radii)} radius fractions")
        if any(b <= a for a, b in zip(radii, radii[1:])) or radii[0] <= 0 or radii[-1] > 1:
            raise ObisConfigError("shell radii must be strictly increasing in (0, 1]")
        if not self.class_channels or len(set(self.class_channels)) != len(self.class_channels):
            raise ObisConfigError("class_channels must be non-empty and unique")

    def channel_names(self) -> tuple[str, ...]:
        return (EDGE_CHANNEL,) + tuple(class_channel(c) for c in self.class_channels)


def class_channel(label: str) -> str:
    return f"cls_{label}"


def frame_mean_intensity(pc: PointCloud) -> float:
    return float(pc.intensity.mean()) if len(pc) else 0.0


def box_edge_points(box: Box3D, interval: float) -> np.ndarray:
    """Points every ``interval`` along the 12 edges, corners counted once."""
    corners = _CORNER_SIGNS * (box.dims / 2)
    pts, seen = [], set()
    for a, b in _EDGES:
        length = float(np.linalg.norm(corners[b] - corners[a]))
        n = math.ceil(length / interval - 1e-9) + 1
        t = np.linspace(0.0, 1.0, n)
        seg = corners[a] + t[:, None] * (corners[b] - corners[a])
        for p in seg:
            key = tuple(p)
            if key not in seen:
                seen.add(key)
                pts.append(p)
    return box.to_world(np.array(pts))


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, near-uniform unit vectors."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = math.pi * (3 - math.sqrt(5)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def gaussian_offsets(box: Box3D, cfg: ObisConfig) -> np.ndarray:
    """Box-frame offsets: the center, then each shell on the axis-scaled sphere."""
    half = box.dims / 2
    unit = fibonacci_sphere(cfg.points_per_shell)
    shells = [np.zeros((1, 3))] + [unit * half * f for f in cfg.shell_radii_fraction]
    return np.concatenate(shells)


def gaussian_value(offsets: np.ndarray, dims: np.ndarray) -> np.ndarray:
    sigma = dims / 2
    return np.exp(-0.5 * np.sum((offsets / sigma) ** 2, axis=-1))


def add_boundary_points(pc: PointCloud, boxes, cfg: ObisConfig) -> PointCloud:
    pc = pc.with_channels([EDGE_CHANNEL])
    mean_i = frame_mean_intensity(pc)
    parts = [pc]
    col = pc.channels.index(EDGE_CHANNEL)
    for box in boxes:
        pts = box_edge_points(box, cfg.edge_interval)
        aux = np.zeros((len(pts), len(pc.channels)))
        aux[:, col] = 1.0
        parts.append(PointCloud(pts, np.full(len(pts), mean_i), aux, pc.channels))
    return PointCloud.concat(parts)


def add_gaussian_points(pc: PointCloud, boxes, cfg: ObisConfig) -> PointCloud:
    names = [class_channel(c) for c in cfg.class_channels]
    pc = pc.with_channels(names)
    mean_i = frame_mean_intensity(pc)
    parts = [pc]
    for box in boxes:
        if box.label not in cfg.class_channels:
            raise ObisConfigError(f"unknown class {box.label!r}; known {cfg.class_channels}")
        off = gaussian_offsets(box, cfg)
        aux = np.zeros((len(off), len(pc.channels)))
        aux[:, pc.channels.index(class_channel(box.label))] = gaussian_value(off, box.dims)
        parts.append(PointCloud(box.to_world(off), np.full(len(off), mean_i), aux, pc.channels))
    return PointCloud.concat(parts)


def obis_augment(pc: PointCloud, boxes, cfg: ObisConfig) -> PointCloud:
    """Append edge and Gaussian points for every box.

    Output order is the original points, then per box its edge points followed
    by its Gaussian points.  Intensity of added points is the mean intensity of
    the original frame.  Not idempotent: apply once per frame.
    """
    pc = pc.with_channels(cfg.channel_names())
    mean_i = frame_mean_intensity(pc)
    parts = [pc]
    for box in boxes:
        if box.label not in cfg.class_channels:
            raise ObisConfigError(f"unknown class {box.label!r}; known {cfg.class_channels}")
        edges = box_edge_points(box, cfg.edge_interval)
        aux = np.zeros((len(edges), len(pc.channels)))
        aux[:, pc.channels.index(EDGE_CHANNEL)] = 1.0
        parts.append(PointCloud(edges, np.full(len(edges), mean_i), aux, pc.channels))
        off = gaussian_offsets(box, cfg)
        aux = np.zeros((len(off), len(pc.channels)))
        aux[:, pc.channels.index(class_channel(box.label))] = gaussian_value(off, box.dims)
        parts.append(PointCloud(box.to_world(off), np.full(len(off), mean_i), aux, pc.channels))
    return PointCloud.concat(parts)
