"""In-memory dataset assembly: generate straight into training tensors.

Generation is a pure function of the dataset spec, so small and mid-size
runs can skip the on-disk layout entirely; the arrays here are identical
to what write_dataset followed by load_dataset_arrays would produce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scenesim import DatasetSpec, part_names, render_pair, sample_scene
from .training import flows_to_tensor, frames_to_tensor


def dataset_tensors(spec: DatasetSpec, glyphs: dict | None = None,
                    progress: bool = False) -> dict[str, torch.Tensor]:
    """Generate every pair of a spec as channel-first training tensors."""
    frames1, frames2, flows = [], [], []
    for i in range(spec.n_pairs):
        pair = render_pair(sample_scene(spec, i, glyphs=glyphs))
        frames1.append(pair.frame1)
        frames2.append(pair.frame2)
        flows.append(pair.flow.values)
        if progress and (i + 1) % 500 == 0:
            print(f"  generated {i + 1}/{spec.n_pairs} pairs")
    return {
        "frame1": frames_to_tensor(np.stack(frames1)),
        "frame2": frames_to_tensor(np.stack(frames2)),
        "flow": flows_to_tensor(np.stack(flows)),
    }


@dataclass
class EvalSet:
    """Ground-truth-equipped evaluation bundle for one dataset spec."""

    frames: torch.Tensor                 # (N, 3, H, W)
    flows: torch.Tensor                  # (N, 2, H, W)
    gt_masks: list[list[np.ndarray]]     # per scene, per part
    names: list[str]
    ancestors: np.ndarray                # shared ground-truth ancestor matrix


def eval_set(spec: DatasetSpec, n: int, glyphs: dict | None = None) -> EvalSet:
    """First ``n`` pairs of a spec with masks and the ancestor matrix."""
    frames, flows, masks = [], [], []
    ancestors = None
    for i in range(min(n, spec.n_pairs)):
        pair = render_pair(sample_scene(spec, i, glyphs=glyphs))
        frames.append(pair.frame1)
        flows.append(pair.flow.values)
        masks.append(pair.masks)
        ancestors = pair.scene.ancestor_matrix
    return EvalSet(
        frames=frames_to_tensor(np.stack(frames)),
        flows=flows_to_tensor(np.stack(flows)),
        gt_masks=masks,
        names=part_names(spec),
        ancestors=ancestors,
    )
