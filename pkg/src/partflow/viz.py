"""Small rendering helpers for reports: flow colorings, overlays, grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def flow_to_rgb(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering of a (H, W, 2) flow field (hue=angle, sat=speed)."""
    from matplotlib.colors import hsv_to_rgb

    dx, dy = flow[..., 0], flow[..., 1]
    magnitude = np.hypot(dx, dy)
    scale = max_magnitude or max(float(magnitude.max()), 1e-6)
    hsv = np.stack([
        (np.arctan2(-dy, -dx) / (2 * np.pi) + 0.5),
        np.clip(magnitude / scale, 0, 1),
        np.ones_like(magnitude),
    ], axis=-1)
    return hsv_to_rgb(hsv).astype(np.float32)


def overlay_mask(frame: np.ndarray, mask: np.ndarray,
                 color=(1.0, 0.2, 0.2), opacity: float = 0.55) -> np.ndarray:
    out = frame.copy()
    tint = np.asarray(color, dtype=np.float32)
    out[mask] = (1 - opacity) * out[mask] + opacity * tint
    return out


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def image_grid(images: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Concatenate same-size HxWx3 images horizontally with white padding."""
    if not images:
        raise ValueError("empty grid")
    h = images[0].shape[0]
    spacer = np.ones((h, pad, 3), dtype=np.float32)
    row = []
    for i, img in enumerate(images):
        if i:
            row.append(spacer)
        row.append(img)
    return np.concatenate(row, axis=1)
