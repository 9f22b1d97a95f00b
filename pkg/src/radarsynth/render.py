"""BEV heatmaps as binary PPM images with a jet colormap.

The colormap is a 4-segment piecewise-linear jet on [0, 1] with knots

    value   RGB
    0.00    (0, 0, 255)      blue
    0.25    (0, 255, 255)    cyan
    0.50    (0, 255, 0)      green
    0.75    (255, 255, 0)    yellow
    1.00    (255, 0, 0)      red

linear in between, 8-bit channels ``rint(255 * c)``.  Values are clamped to
[0, 1] and NaN maps to 0.

Image rows run along -x (far range at the top) and columns along -y, so the
picture is the scene seen from above with the sensor at the bottom center.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

JET_KNOTS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
JET_RGB = np.array([[0, 0, 1], [0, 1, 1], [0, 1, 0], [1, 1, 0], [1, 0, 0]], dtype=np.float64)


def jet(values: np.ndarray) -> np.ndarray:
    """uint8 RGB for values clamped to [0, 1]; output shape ``values.shape + (3,)``."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0), 0.0, 1.0)
    c = np.stack([np.interp(v, JET_KNOTS, JET_RGB[:, i]) for i in range(3)], axis=-1)
    return np.rint(255.0 * c).astype(np.uint8)


def encode_ppm(matrix: np.ndarray) -> bytes:
    """P6 image of an (NX, NY) BEV matrix."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"BEV matrix must be 2-D, got shape {m.shape}")
    img = jet(m[::-1, ::-1])
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def bev_render(matrix: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(matrix))


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
