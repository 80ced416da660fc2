"""Silhouette rasterizers for the synthetic shape vocabulary.

Every rasterizer returns a boolean (size, size) array with at least one
pixel set. Shapes are drawn centered in their bounding box; orientation
variants (triangle_d, parallelogram_r, trapezoid_b) are mirror images of
their base shape so that paired kinds stay visually distinguishable.
"""

from __future__ import annotations

import numpy as np

GEOMETRIC_KINDS = (
    "circle",
    "triangle",
    "triangle_d",
    "square",
    "parallelogram_l",
    "parallelogram_r",
    "trapezoid_a",
    "trapezoid_b",
    "pentagon",
)


def circle_mask(size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2


def square_mask(size: int) -> np.ndarray:
    return np.ones((size, size), dtype=bool)


def triangle_mask(size: int) -> np.ndarray:
    # Upward isoceles: apex at top center, base spanning the bottom row.
    c = (size - 1) / 2.0
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    half_width = (rows + 1) / 2.0
    return np.abs(cols - c) <= half_width


def triangle_d_mask(size: int) -> np.ndarray:
    return np.flipud(triangle_mask(size))


def _parallelogram(size: int, lean_left: bool) -> np.ndarray:
    shear = max(1, size // 2)
    width = size - shear
    mask = np.zeros((size, size), dtype=bool)
    for i in range(size):
        frac = i / (size - 1) if size > 1 else 0.0
        offset = int(round(shear * (1.0 - frac))) if lean_left else int(round(shear * frac))
        mask[i, offset:offset + width] = True
    return mask


def parallelogram_l_mask(size: int) -> np.ndarray:
    return _parallelogram(size, lean_left=True)


def parallelogram_r_mask(size: int) -> np.ndarray:
    return _parallelogram(size, lean_left=False)


def trapezoid_a_mask(size: int) -> np.ndarray:
    # Wide base at the bottom, half-width growing from size/4 to size/2.
    c = (size - 1) / 2.0
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    frac = rows / (size - 1) if size > 1 else rows * 0.0
    half_width = size / 4.0 + frac * size / 4.0
    return np.abs(cols - c) <= half_width


def trapezoid_b_mask(size: int) -> np.ndarray:
    return np.flipud(trapezoid_a_mask(size))


def pentagon_mask(size: int) -> np.ndarray:
    c = (size - 1) / 2.0
    r = size / 2.0
    angles = np.deg2rad(-90 + 72 * np.arange(5))
    verts = np.stack([c + r * np.cos(angles), c + r * np.sin(angles)], axis=1)
    yy, xx = np.mgrid[0:size, 0:size]
    pts_x = xx.astype(np.float64)
    pts_y = yy.astype(np.float64)
    inside_pos = np.ones((size, size), dtype=bool)
    inside_neg = np.ones((size, size), dtype=bool)
    for k in range(5):
        px, py = verts[k]
        qx, qy = verts[(k + 1) % 5]
        cross = (qx - px) * (pts_y - py) - (qy - py) * (pts_x - px)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def digit_mask(size: int, glyph: np.ndarray) -> np.ndarray:
    # Nearest-neighbor scaling keeps the glyph binary and deterministic.
    src = glyph.shape[0]
    idx = np.minimum((np.arange(size) * src) // size, src - 1)
    return glyph[np.ix_(idx, idx)].astype(bool)


_RASTERIZERS = {
    "circle": circle_mask,
    "triangle": triangle_mask,
    "triangle_d": triangle_d_mask,
    "square": square_mask,
    "parallelogram_l": parallelogram_l_mask,
    "parallelogram_r": parallelogram_r_mask,
    "trapezoid_a": trapezoid_a_mask,
    "trapezoid_b": trapezoid_b_mask,
    "pentagon": pentagon_mask,
}


def shape_mask(kind: str, size: int, glyph: np.ndarray | None = None) -> np.ndarray:
    """Rasterize a shape silhouette into a boolean (size, size) array."""
    if kind == "digit":
        if glyph is None:
            raise ValueError("digit parts need a glyph bitmap")
        return digit_mask(size, glyph)
    try:
        return _RASTERIZERS[kind](size)
    except KeyError:
        raise ValueError(f"unknown shape kind {kind!r}") from None
