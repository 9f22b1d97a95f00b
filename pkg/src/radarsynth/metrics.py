"""Image-quality metrics, rotated-box IoU, AP and the voxel center-shift study."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import Box3D, DenseGrid3D, ScaleDomain, bev_mean_pool, log_denormalize, log_normalize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _local_mean(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean SSIM over all fully-inside 11x11 Gaussian windows (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    w = gaussian_window()
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    mu_a, mu_b = _local_mean(a, w), _local_mean(b, w)
    var_a = _local_mean(a * a, w) - mu_a ** 2
    var_b = _local_mean(b * b, w) - mu_b ** 2
    cov = _local_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def metric_bev(g: DenseGrid3D, v_ref: float | None = None, order: str = "normalize_then_pool"
               ) -> np.ndarray:
    """BEV image used for PSNR/SSIM.

    ``normalize_then_pool`` log-normalizes each voxel and then averages over
    height; ``pool_then_normalize`` averages raw power first.
    """
    if order not in ("normalize_then_pool", "pool_then_normalize"):
        raise ValueError(f"unknown order {order!r}")
    if order == "normalize_then_pool":
        if g.scale_domain == ScaleDomain.RAW_POWER:
            g = log_normalize(g, v_ref)
        return bev_mean_pool(g)
    if g.scale_domain == ScaleDomain.LOG_NORMALIZED:
        if v_ref is None:
            raise ValueError("pool_then_normalize on a log-normalized grid needs v_ref")
        g = log_denormalize(g, v_ref)
    pooled = DenseGrid3D(g.origin, g.resolution, bev_mean_pool(g)[:, :, None])
    return log_normalize(pooled, v_ref).values[:, :, 0]


def bev_scores(pred: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """PSNR and SSIM of height-averaged log-normalized grids.

    Accepts (X, Y, Z) or single-channel (X, Y, Z, 1) arrays; SSIM is NaN when
    the BEV image is smaller than the SSIM window.
    """
    a, b = np.asarray(pred), np.asarray(target)
    a = a[..., 0] if a.ndim == 4 else a
    b = b[..., 0] if b.ndim == 4 else b
    a, b = a.mean(axis=2, dtype=np.float64), b.mean(axis=2, dtype=np.float64)
    return psnr(a, b), (ssim(a, b) if min(a.shape) >= SSIM_WINDOW else float("nan"))


# ---------------------------------------------------------------------------
# rotated boxes


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex counter-clockwise ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection(b1: Box3D, b2: Box3D) -> float:
    # cheap reject on circumscribed circles
    r1 = 0.5 * math.hypot(b1.dims[0], b1.dims[1])
    r2 = 0.5 * math.hypot(b2.dims[0], b2.dims[1])
    if math.hypot(*(b1.center[:2] - b2.center[:2])) > r1 + r2:
        return 0.0
    return polygon_area(_clip_polygon(b1.corners_bev(), b2.corners_bev()))


def bev_iou(b1: Box3D, b2: Box3D) -> float:
    inter = bev_intersection(b1, b2)
    union = b1.dims[0] * b1.dims[1] + b2.dims[0] * b2.dims[1] - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def z_overlap(b1: Box3D, b2: Box3D) -> float:
    lo = max(b1.center[2] - b1.dims[2] / 2, b2.center[2] - b2.dims[2] / 2)
    hi = min(b1.center[2] + b1.dims[2] / 2, b2.center[2] + b2.dims[2] / 2)
    return max(0.0, hi - lo)


def iou_3d(b1: Box3D, b2: Box3D) -> float:
    inter = bev_intersection(b1, b2) * z_overlap(b1, b2)
    union = float(np.prod(b1.dims) + np.prod(b2.dims)) - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


# ---------------------------------------------------------------------------
# average precision


@dataclass
class DetectionRecord:
    frame: str
    box: Box3D
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


def match_detections(dets, gts: dict, iou_thresh: float = 0.3, mode: str = "bev"):
    """Greedy matching in score order; returns (is_tp flags in sorted order, n_gt)."""
    iou_fn = {"bev": bev_iou, "3d": iou_3d}[mode.lower()]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, str(dets[i].frame), i))
    matched = {f: np.zeros(len(b), dtype=bool) for f, b in gts.items()}
    flags = []
    for i in order:
        d = dets[i]
        boxes = gts.get(d.frame, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(boxes):
            if matched[d.frame][j]:
                continue
            v = iou_fn(d.box, g)
            if v > best:
                best, best_j = v, j
        tp = best_j >= 0 and best >= iou_thresh
        if tp:
            matched[d.frame][best_j] = True
        flags.append(tp)
    n_gt = sum(len(b) for b in gts.values())
    return np.array(flags, dtype=bool), n_gt


def interpolated_ap(flags: np.ndarray, n_gt: int, points: int = 40) -> float:
    """Mean of interpolated precision at recall i/points, i = 1..points.

    Evaluated in exact rational arithmetic and rounded once at the end.
    """
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(flags).tolist()
    ranks = range(1, len(tp) + 1)
    total = Fraction(0)
    for i in range(1, points + 1):
        # recall tp / n_gt >= i / points, compared in integers
        reached = [Fraction(t, k) for t, k in zip(tp, ranks) if t * points >= i * n_gt]
        total += max(reached, default=Fraction(0))
    return float(total / points)


def average_precision(dets, gts: dict, iou_thresh: float = 0.3, mode: str = "bev",
                      points: int = 40) -> float:
    flags, n_gt = match_detections(dets, gts, iou_thresh, mode)
    return interpolated_ap(flags, n_gt, points)


# ---------------------------------------------------------------------------
# center-shift study

CLASS_DIM_RANGES = {
    "Sedan": ((3.9, 4.8), (1.7, 1.9), (1.4, 1.6)),
    "BusTruck": ((7.0, 10.0), (2.3, 2.6), (2.6, 2.9)),
}


def surface_samples(dims: np.ndarray, spacing: float) -> np.ndarray:
    """Cell-centered grid samples on all six faces of a centered box.

    The pattern is point-symmetric so its centroid is exactly the origin.
    """
    half = np.asarray(dims) / 2
    pts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(1, math.ceil(dims[u] / spacing))
        nv = max(1, math.ceil(dims[v] / spacing))
        su = (np.arange(nu) + 0.5) / nu * dims[u] - half[u]
        sv = (np.arange(nv) + 0.5) / nv * dims[v] - half[v]
        gu, gv = np.meshgrid(su, sv, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((gu.size, 3))
            face[:, u], face[:, v] = gu.ravel(), gv.ravel()
            face[:, axis] = sign * half[axis]
            pts.append(face)
    return np.concatenate(pts)


def occupied_centroid(points: np.ndarray, resolution: float) -> np.ndarray:
    idx = np.floor(points / resolution).astype(np.int64)
    lo = idx.min(axis=0)
    idx -= lo
    span = idx.max(axis=0) + 1
    keys = np.unique((idx[:, 0] * span[1] + idx[:, 1]) * span[2] + idx[:, 2])
    cells = np.stack(np.unravel_index(keys, tuple(span)), axis=1) + lo
    return (cells + 0.5).mean(axis=0) * resolution


def center_shift_study(n: int = 1000, resolutions=(0.05, 0.1, 0.2, 0.4), seed: int = 0,
                       spacing: float = 0.05, class_mix=None) -> dict[float, float]:
    """Mean distance between box centers and the centroid of their occupied voxels.

    Boxes get class-typical dims (uniform within :data:`CLASS_DIM_RANGES`),
    centers uniform over [0, 70] x [-35, 35] x [-1, 1] m and uniform yaw.
    Each box surface is sampled on a regular ``spacing`` grid, voxelized on a
    world-aligned lattice, and the centroid of occupied voxel centers compared
    with the true center.
    """
    rng = np.random.default_rng(seed)
    mix = class_mix or {"Sedan": 0.8, "BusTruck": 0.2}
    labels, probs = list(mix), np.array(list(mix.values()), dtype=np.float64)
    probs /= probs.sum()
    shifts = {float(r): [] for r in resolutions}
    for _ in range(n):
        label = labels[rng.choice(len(labels), p=probs)]
        dims = np.array([rng.uniform(*rg) for rg in CLASS_DIM_RANGES[label]])
        center = rng.uniform([0, -35, -1], [70, 35, 1])
        box = Box3D(center, dims, rng.uniform(-math.pi, math.pi), label)
        pts = box.to_world(surface_samples(dims, spacing))
        for r in resolutions:
            c = occupied_centroid(pts, r)
            shifts[float(r)].append(float(np.linalg.norm(c - center)))
    return {r: float(np.mean(v)) for r, v in shifts.items()}
