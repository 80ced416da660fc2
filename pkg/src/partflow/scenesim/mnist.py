"""MNIST IDX ingestion for the digit scenes.

Reads the standard big-endian IDX image/label files (optionally gzipped)
and returns binarized glyph bitmaps grouped by digit class 0-5. Classes
6-9 are dropped: the digit scenes only use the first six classes.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
BINARIZE_THRESHOLD = 127
DIGIT_CLASSES = range(6)


class MnistFormatError(ValueError):
    """Malformed IDX file (bad magic or truncated payload)."""


class MnistDataError(ValueError):
    """Structurally valid files whose content cannot back the digit scenes."""


def _read_bytes(path: Path) -> bytes:
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _require(data: bytes, offset: int, count: int, path: Path) -> bytes:
    if len(data) < offset + count:
        raise MnistFormatError(
            f"{path}: truncated at byte {len(data)}, expected {offset + count} bytes")
    return data[offset:offset + count]


def read_idx_images(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = _read_bytes(path)
    header = np.frombuffer(_require(data, 0, 16, path), dtype=">u4")
    if header[0] != IMAGE_MAGIC:
        raise MnistFormatError(f"{path}: bad image magic 0x{header[0]:08x}")
    n, rows, cols = (int(v) for v in header[1:])
    pixels = _require(data, 16, n * rows * cols, path)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = _read_bytes(path)
    header = np.frombuffer(_require(data, 0, 8, path), dtype=">u4")
    if header[0] != LABEL_MAGIC:
        raise MnistFormatError(f"{path}: bad label magic 0x{header[0]:08x}")
    n = int(header[1])
    return np.frombuffer(_require(data, 8, n, path), dtype=np.uint8)


def _find_file(root: Path, fragment: str) -> Path:
    hits = sorted(p for p in root.iterdir()
                  if fragment in p.name and "ubyte" in p.name)
    if not hits:
        raise MnistFormatError(f"no *{fragment}*ubyte* file under {root}")
    return hits[0]


def load_mnist(path: str | Path) -> dict[int, np.ndarray]:
    """Load glyphs from a directory holding IDX image + label files.

    Returns {digit class: (n, 28, 28) boolean bitmaps} for classes 0-5.
    """
    root = Path(path)
    if not root.is_dir():
        raise MnistFormatError(f"{root} is not a directory")
    images = read_idx_images(_find_file(root, "images"))
    labels = read_idx_labels(_find_file(root, "labels"))
    if len(images) != len(labels):
        raise MnistDataError(
            f"{root}: {len(images)} images but {len(labels)} labels")
    glyphs: dict[int, np.ndarray] = {}
    for cls in DIGIT_CLASSES:
        bitmaps = images[labels == cls] > BINARIZE_THRESHOLD
        if len(bitmaps) == 0:
            raise MnistDataError(f"{root}: no examples of digit {cls}")
        glyphs[cls] = bitmaps
    return glyphs
