"""Synthetic frame-pair datasets with analytically exact motion ground truth."""

from .scene import (
    FAMILIES,
    DatasetSpec,
    FlowField,
    PartSpec,
    SceneGenerationError,
    SceneInstance,
    ScenePair,
    family_templates,
    ground_truth_flow,
    pair_rng,
    pair_seed,
    part_names,
    render_pair,
    resolve_occlusion,
    sample_scene,
    scene_to_dict,
)
from .shapes import GEOMETRIC_KINDS, shape_mask
from .mnist import (
    MnistDataError,
    MnistFormatError,
    load_mnist,
    read_idx_images,
    read_idx_labels,
)
from .io import (
    DatasetIOError,
    load_dataset_arrays,
    read_flow,
    read_masks,
    read_pair_dir,
    spec_from_manifest,
    write_dataset,
    write_flow,
    write_pair_dir,
)

__all__ = [
    "FAMILIES",
    "GEOMETRIC_KINDS",
    "DatasetSpec",
    "DatasetIOError",
    "FlowField",
    "MnistDataError",
    "MnistFormatError",
    "PartSpec",
    "SceneGenerationError",
    "SceneInstance",
    "ScenePair",
    "family_templates",
    "ground_truth_flow",
    "load_dataset_arrays",
    "load_mnist",
    "pair_rng",
    "pair_seed",
    "part_names",
    "read_flow",
    "read_idx_images",
    "read_idx_labels",
    "read_masks",
    "read_pair_dir",
    "render_pair",
    "resolve_occlusion",
    "sample_scene",
    "scene_to_dict",
    "shape_mask",
    "spec_from_manifest",
    "write_dataset",
    "write_flow",
    "write_pair_dir",
]
