import gzip
import struct

import numpy as np
import pytest

from partflow.scenesim import (
    MnistDataError,
    MnistFormatError,
    load_mnist,
    read_idx_images,
    read_idx_labels,
)


def idx_images_bytes(images):
    n, rows, cols = images.shape
    return struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()


def idx_labels_bytes(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


@pytest.fixture
def idx_dir(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.array(sorted(list(range(10)) * 3), dtype=np.uint8)
    images = rng.integers(0, 256, size=(len(labels), 28, 28)).astype(np.uint8)
    images[labels == 2] = 255  # keep at least one class fully bright
    (tmp_path / "train-images-idx3-ubyte").write_bytes(idx_images_bytes(images))
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(idx_labels_bytes(labels))
    return tmp_path, images, labels


def test_load_groups_first_six_classes(idx_dir):
    root, images, labels = idx_dir
    glyphs = load_mnist(root)
    assert sorted(glyphs) == [0, 1, 2, 3, 4, 5]
    for cls, bitmaps in glyphs.items():
        assert bitmaps.shape == (3, 28, 28)
        assert bitmaps.dtype == bool
        want = images[labels == cls] > 127
        assert np.array_equal(bitmaps, want)


def test_binarized_values(idx_dir):
    root, _, _ = idx_dir
    glyphs = load_mnist(root)
    for bitmaps in glyphs.values():
        assert set(np.unique(bitmaps.astype(int))) <= {0, 1}


def test_gzipped_files(tmp_path, idx_dir):
    root, images, labels = idx_dir
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        data = (root / name).read_bytes()
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress(data))
    glyphs = load_mnist(tmp_path)
    assert sorted(glyphs) == [0, 1, 2, 3, 4, 5]


def test_bad_magic(tmp_path):
    (tmp_path / "f-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0xdead, 1, 28, 28) + b"\x00" * (28 * 28))
    with pytest.raises(MnistFormatError, match="magic 0x0000dead"):
        read_idx_images(tmp_path / "f-images-idx3-ubyte")


def test_truncated_names_offset(tmp_path):
    path = tmp_path / "t-images-idx3-ubyte"
    full = idx_images_bytes(np.zeros((2, 28, 28), dtype=np.uint8))
    path.write_bytes(full[:100])
    with pytest.raises(MnistFormatError, match="truncated at byte 100"):
        read_idx_images(path)


def test_empty_class_rejected(tmp_path):
    labels = np.array([0, 1, 2, 3, 4] * 2, dtype=np.uint8)  # no 5s
    images = np.full((len(labels), 28, 28), 200, dtype=np.uint8)
    (tmp_path / "x-images-idx3-ubyte").write_bytes(idx_images_bytes(images))
    (tmp_path / "x-labels-idx1-ubyte").write_bytes(idx_labels_bytes(labels))
    with pytest.raises(MnistDataError, match="digit 5"):
        load_mnist(tmp_path)


def test_label_count_mismatch(tmp_path):
    (tmp_path / "y-images-idx3-ubyte").write_bytes(
        idx_images_bytes(np.zeros((2, 28, 28), dtype=np.uint8)))
    (tmp_path / "y-labels-idx1-ubyte").write_bytes(idx_labels_bytes([0, 1, 2]))
    with pytest.raises(MnistDataError, match="2 images but 3 labels"):
        load_mnist(tmp_path)


def test_missing_files(tmp_path):
    with pytest.raises(MnistFormatError, match="no .*ubyte"):
        load_mnist(tmp_path)


def test_labels_reader(idx_dir):
    root, _, labels = idx_dir
    got = read_idx_labels(root / "train-labels-idx1-ubyte")
    assert np.array_equal(got, labels)
