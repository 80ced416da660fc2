"""Structural descriptor: composing local motions into global ones.

The ancestor matrix S has S[i, k] == 1 when dimension i is an ancestor of
dimension k; the global motion of k is its local motion plus the local
motions of all its ancestors. During learning S is relaxed to [0, 1] via
a sigmoid over trainable logits, with the (structurally inert) diagonal
hard-zeroed. The matrix is shared across all data points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DEFAULT_LOGIT_INIT = -2.0   # sigmoid(-2) ~ 0.12: start near-zero, biased to sparse trees
BINARIZE_THRESHOLD = 0.5


class InvalidStructureError(ValueError):
    """Binarized matrix is not the transitive closure of a forest."""


class StructureParams(nn.Module):
    """Trainable logits W with derived relaxed ancestor matrix S."""

    def __init__(self, d: int, logit_init: float = DEFAULT_LOGIT_INIT):
        super().__init__()
        self.d = d
        self.logits = nn.Parameter(torch.full((d, d), float(logit_init)))
        self.register_buffer("offdiag", 1.0 - torch.eye(d))

    def matrix(self) -> torch.Tensor:
        """S in [0, 1]^{d x d} with a hard-zero diagonal."""
        return torch.sigmoid(self.logits) * self.offdiag

    def forward(self) -> torch.Tensor:
        return self.matrix()


def compose_global(local_motions: torch.Tensor, structure: torch.Tensor) -> torch.Tensor:
    """Global motions: globals[k] = locals[k] + sum_i S[i, k] * locals[i].

    ``local_motions`` is (B, d, 2, H, W); ``structure`` is (d, d) with zero
    diagonal. Linear and differentiable in both arguments.
    """
    if local_motions.dim() != 5:
        raise ValueError(f"local motions must be (B, d, 2, H, W), got {tuple(local_motions.shape)}")
    d = local_motions.shape[1]
    if structure.shape != (d, d):
        raise ValueError(f"structure must be ({d}, {d}), got {tuple(structure.shape)}")
    inherited = torch.einsum("ik,bichw->bkchw", structure, local_motions)
    return local_motions + inherited


def overall_motion(global_motions: torch.Tensor) -> torch.Tensor:
    """Overall flow: elementwise sum of the per-dimension global motions."""
    return global_motions.sum(dim=1)


def structure_penalty(local_motions: torch.Tensor) -> torch.Tensor:
    """Sum over dimensions of the L2 norm of each local motion field.

    The norm is the root of summed squares over all pixels and both
    channels of one field; batched inputs are averaged over the batch.
    """
    if local_motions.dim() == 4:
        local_motions = local_motions.unsqueeze(0)
    sq = (local_motions ** 2).sum(dim=(2, 3, 4))
    # exact 0 (with zero gradient) for all-zero fields; clamp keeps sqrt off 0
    per_dim = torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=1e-38)), sq)
    return per_dim.sum(dim=1).mean()


def binarize_structure(structure, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    """Binary ancestor matrix: 1 iff S[i, k] > threshold, diagonal zeroed."""
    s = structure.detach().cpu().numpy() if isinstance(structure, torch.Tensor) else np.asarray(structure)
    binary = (s > threshold).astype(np.uint8)
    np.fill_diagonal(binary, 0)
    return binary


def transitive_closure(adjacency: np.ndarray) -> np.ndarray:
    """Closure of a binary relation (Warshall); diagonal reports cycles."""
    closure = adjacency.astype(bool).copy()
    n = closure.shape[0]
    for j in range(n):
        closure |= np.outer(closure[:, j], closure[j, :])
    return closure.astype(np.uint8)


@dataclass
class PartHierarchy:
    """Validated forest over the active latent dimensions."""

    active_dims: tuple[int, ...]
    parent: dict[int, int | None]
    ancestor_sets: dict[int, frozenset[int]]

    def edges(self) -> list[tuple[int, int]]:
        """(child, parent) pairs."""
        return [(k, p) for k, p in sorted(self.parent.items()) if p is not None]

    def roots(self) -> list[int]:
        return [k for k, p in sorted(self.parent.items()) if p is None]


def _find_cycle(closure: np.ndarray, dims: list[int]) -> list[int]:
    on_cycle = [dims[i] for i in range(len(dims)) if closure[i, i]]
    return on_cycle


def extract_hierarchy(binary: np.ndarray, active_dims) -> PartHierarchy:
    """Recover the parent forest from a binarized ancestor matrix.

    ``binary`` is indexed by raw dimension ids; only the rows/columns in
    ``active_dims`` are considered. The restricted matrix must be a strict
    partial order that is transitively closed with chain ancestor sets;
    violations raise InvalidStructureError naming the offending entries
    (structures are reported, never silently repaired).
    """
    dims = list(active_dims)
    idx = {dim: i for i, dim in enumerate(dims)}
    a = np.asarray(binary, dtype=np.uint8)[np.ix_(dims, dims)]

    closure = transitive_closure(a)
    cyclic = _find_cycle(closure, dims)
    if cyclic:
        raise InvalidStructureError(f"cycle through dimensions {cyclic}")
    missing = [(dims[i], dims[k]) for i, k in zip(*np.nonzero(closure & ~a.astype(bool)))]
    if missing:
        raise InvalidStructureError(
            f"not transitively closed: missing ancestor entries {missing}")

    ancestor_sets: dict[int, frozenset[int]] = {}
    for k, dim in enumerate(dims):
        ancestors = [dims[i] for i in range(len(dims)) if a[i, k]]
        for i in ancestors:
            for j in ancestors:
                if i != j and not a[idx[i], idx[j]] and not a[idx[j], idx[i]]:
                    raise InvalidStructureError(
                        f"ancestors of {dim} are not a chain: {i} and {j} unordered")
        ancestor_sets[dim] = frozenset(ancestors)

    parent: dict[int, int | None] = {}
    for dim in dims:
        ancestors = ancestor_sets[dim]
        if not ancestors:
            parent[dim] = None
        else:
            # In a chain the parent is the ancestor with the largest ancestor set.
            parent[dim] = max(ancestors, key=lambda i: (len(ancestor_sets[i]), i))
    return PartHierarchy(active_dims=tuple(dims), parent=parent,
                         ancestor_sets=ancestor_sets)


def hierarchy_to_text(hierarchy: PartHierarchy,
                      labels: dict[int, str] | None = None) -> str:
    """Edge list export, one ``child <- parent`` line per edge."""
    name = (lambda k: labels[k]) if labels else (lambda k: f"dim{k}")
    lines = [f"{name(k)} <- {name(p)}" for k, p in hierarchy.edges()]
    lines += [f"{name(r)} <- (root)" for r in hierarchy.roots()]
    return "\n".join(lines) + "\n"


def structure_to_csv(structure) -> str:
    s = structure.detach().cpu().numpy() if isinstance(structure, torch.Tensor) else np.asarray(structure)
    return "\n".join(",".join(f"{v:.6f}" for v in row) for row in s) + "\n"
