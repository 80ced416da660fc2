import numpy as np
import pytest
import torch

from partflow.scenesim import DatasetSpec, PartSpec, SceneInstance


def pytest_addoption(parser):
    parser.addoption(
        "--acceptance-seeds", type=int, default=5,
        help="max seeds to try for the trained acceptance criteria")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def shapes3_spec():
    return DatasetSpec(family="shapes3", n_pairs=50, canvas=(32, 32), rng_seed=7)


def make_scene(parts, canvas=(32, 32)):
    """SceneInstance from explicit parts; ancestor matrix derived from parents."""
    n = len(parts)
    anc = np.zeros((n, n), dtype=np.uint8)
    for k, p in enumerate(parts):
        j = p.parent_index
        while j is not None:
            anc[j, k] = 1
            j = parts[j].parent_index
    return SceneInstance(parts=list(parts), canvas=canvas,
                         ancestor_matrix=anc, rng_seed=0)


def part(kind="square", size=6, pos=(2, 2), color=(1.0, 0.0, 0.0), z=0,
         parent=None, motion=(0.0, 0.0)):
    return PartSpec(kind=kind, size_px=size, position=pos, color=color,
                    z_order=z, parent_index=parent, local_motion=motion)


@pytest.fixture
def fake_glyphs():
    """Synthetic glyph set: one distinct 28x28 bitmap per class 0-5."""
    rng = np.random.default_rng(0)
    glyphs = {}
    for cls in range(6):
        g = np.zeros((2, 28, 28), dtype=bool)
        g[:, 4 + cls:24 - cls, 4:24] = True
        g[1] = rng.random((28, 28)) > 0.5
        glyphs[cls] = g
    return glyphs
