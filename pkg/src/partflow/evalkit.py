"""Evaluation: latent sparsity, segmentation, hierarchy recovery, sampling.

Everything here treats the model as frozen and read-only. Masks come from
single-frame image-encoder channels; dimension-to-part identity is
resolved by best-permutation IoU matching, mirroring how unsupervised
models are scored against ground truth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .netblocks import PartsModel
from .structure import (
    InvalidStructureError,
    binarize_structure,
    extract_hierarchy,
)

EXHAUSTIVE_MATCH_LIMIT = 9
DEFAULT_KL_THRESHOLD = 0.1
DEFAULT_MASK_THRESHOLD = 0.5


def per_dim_kl(model: PartsModel, flows: torch.Tensor) -> np.ndarray:
    """Mean per-dimension KL to the prior over a probe set of flow fields."""
    model.eval()
    with torch.no_grad():
        mean, logvar = model.motion_encoder(flows)
        kl = 0.5 * (mean.pow(2) + torch.exp(logvar) - logvar - 1.0)
    return kl.mean(dim=0).numpy()


def active_dims(model: PartsModel, flows: torch.Tensor,
                kl_threshold: float = DEFAULT_KL_THRESHOLD) -> list[int]:
    """Dimensions whose posterior departs from the prior, strongest first.

    An empty result means the model collapsed; callers should warn.
    """
    kl = per_dim_kl(model, flows)
    dims = [int(i) for i in np.argsort(-kl) if kl[i] > kl_threshold]
    return dims


def part_mask(model: PartsModel, frame: torch.Tensor, dim: int,
              mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Threshold the normalized magnitude of one image-encoder channel."""
    model.eval()
    with torch.no_grad():
        features = model.image_encoder(frame.unsqueeze(0))[0]
    magnitude = features[dim].abs().numpy()
    peak = magnitude.max()
    if peak <= 0:
        return np.zeros_like(magnitude, dtype=bool)
    return magnitude > mask_threshold * peak


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; both empty -> 1.0, exactly one empty -> 0.0."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


@dataclass
class Assignment:
    """Injective dim -> part matching maximizing summed IoU."""

    dim_to_part: dict[int, int]
    unmatched_parts: list[int]
    total_iou: float

    def part_to_dim(self) -> dict[int, int]:
        return {p: d for d, p in self.dim_to_part.items()}


def match_dims_to_parts(iou_matrix: np.ndarray) -> Assignment:
    """Best assignment of matrix rows (dims) to columns (parts).

    Exhaustive over permutations up to 9 parts, optimal bipartite matching
    beyond. With more parts than dims the leftover parts are reported
    unmatched.
    """
    m = np.asarray(iou_matrix, dtype=np.float64)
    n_dims, n_parts = m.shape
    k = min(n_dims, n_parts)
    if max(n_dims, n_parts) <= EXHAUSTIVE_MATCH_LIMIT:
        best, best_pairs = -1.0, []
        for dims_choice in itertools.permutations(range(n_dims), k):
            total = sum(m[d, p] for p, d in enumerate(dims_choice))
            if total > best:
                best = total
                best_pairs = [(d, p) for p, d in enumerate(dims_choice)]
    else:
        from scipy.optimize import linear_sum_assignment
        rows, cols = linear_sum_assignment(-m)
        best_pairs = list(zip(rows.tolist(), cols.tolist()))
        best = float(m[rows, cols].sum())
    matched_parts = {p for _, p in best_pairs}
    return Assignment(
        dim_to_part=dict(best_pairs),
        unmatched_parts=[p for p in range(n_parts) if p not in matched_parts],
        total_iou=float(best))


@dataclass
class HierarchyResult:
    match: bool
    diffs: list[tuple[int, int, int, int]]   # (part_i, part_k, got, want)
    error: str | None = None


def hierarchy_accuracy(structure, dims_in_part_order: list[int],
                       gt_ancestor_matrix: np.ndarray,
                       threshold: float = 0.5) -> HierarchyResult:
    """Compare the binarized learned matrix against the ground-truth forest.

    ``dims_in_part_order[j]`` is the latent dimension matched to part j.
    Extraction failures (non-forest binarized matrices) are reported as
    non-matches with diagnostics, never repaired.
    """
    binary = binarize_structure(structure, threshold=threshold)
    sub = binary[np.ix_(dims_in_part_order, dims_in_part_order)]
    gt = np.asarray(gt_ancestor_matrix, dtype=np.uint8)
    diffs = [(int(i), int(k), int(sub[i, k]), int(gt[i, k]))
             for i, k in zip(*np.nonzero(sub != gt))]
    error = None
    try:
        extract_hierarchy(binary, dims_in_part_order)
    except InvalidStructureError as e:
        error = str(e)
    return HierarchyResult(match=not diffs and error is None, diffs=diffs, error=error)


def sample_future(model: PartsModel, frame1: torch.Tensor, n_samples: int,
                  rng_seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw latent codes from the prior and decode futures for one frame.

    Returns (frames, flows) of shapes (n, 3, H, W) and (n, 2, H, W);
    deterministic given the seed.
    """
    model.eval()
    if n_samples == 0:
        h, w = frame1.shape[-2:]
        return torch.empty(0, 3, h, w), torch.empty(0, 2, h, w)
    generator = torch.Generator().manual_seed(rng_seed)
    batch = frame1.unsqueeze(0).expand(n_samples, -1, -1, -1)
    with torch.no_grad():
        out = model.sample_prior(batch, generator=generator)
    return out["frame2"], out["overall"]


def masked_mean_motion(field: torch.Tensor, mask: np.ndarray) -> np.ndarray:
    """Mean (dx, dy) of a motion field over a pixel mask (zeros if empty)."""
    m = torch.from_numpy(mask.astype(np.bool_))
    if not m.any():
        return np.zeros(2, dtype=np.float64)
    return field[:, m].mean(dim=1).numpy().astype(np.float64)


def motion_samples(model: PartsModel, frame1: torch.Tensor, dims: list[int],
                   n_samples: int, rng_seed: int,
                   mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> dict[int, dict[str, np.ndarray]]:
    """Per-dimension local/global motion summaries over prior samples.

    For each sampled z, a dimension's local and global motion fields are
    averaged over that dimension's (frame-derived) part mask, giving one
    2-vector per sample per dimension.
    """
    model.eval()
    masks = {dim: part_mask(model, frame1, dim, mask_threshold) for dim in dims}
    generator = torch.Generator().manual_seed(rng_seed)
    local_rows = {dim: [] for dim in dims}
    global_rows = {dim: [] for dim in dims}
    batch_size = 64
    remaining = n_samples
    with torch.no_grad():
        while remaining > 0:
            b = min(batch_size, remaining)
            frames = frame1.unsqueeze(0).expand(b, -1, -1, -1)
            z = torch.randn(b, model.d, generator=generator)
            out = model.decode(frames, z)
            for dim in dims:
                for s in range(b):
                    local_rows[dim].append(
                        masked_mean_motion(out["locals"][s, dim], masks[dim]))
                    global_rows[dim].append(
                        masked_mean_motion(out["globals"][s, dim], masks[dim]))
            remaining -= b
    return {dim: {"local": np.array(local_rows[dim]),
                  "global": np.array(global_rows[dim])} for dim in dims}


def motion_distribution_report(model: PartsModel, frame1: torch.Tensor,
                               dims: list[int], n_samples: int, rng_seed: int,
                               out_dir: str | Path,
                               labels: dict[int, str] | None = None) -> Path:
    """Emit per-dimension motion histograms (CSV + plots) under out_dir."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = motion_samples(model, frame1, dims, n_samples, rng_seed)

    csv_path = out / "motion_samples.csv"
    with open(csv_path, "w") as fh:
        fh.write("sample,dim,local_dx,local_dy,global_dx,global_dy\n")
        for dim in dims:
            loc, glo = samples[dim]["local"], samples[dim]["global"]
            for s in range(len(loc)):
                fh.write(f"{s},{dim},{loc[s, 0]:.6f},{loc[s, 1]:.6f},"
                         f"{glo[s, 0]:.6f},{glo[s, 1]:.6f}\n")

    for dim in dims:
        name = labels.get(dim, f"dim{dim}") if labels else f"dim{dim}"
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        for ax, key, title in zip(axes, ("local", "global"),
                                  ("local motion", "global motion")):
            data = samples[dim][key]
            ax.hist2d(data[:, 0], data[:, 1], bins=24)
            ax.set_title(f"{name}: {title}")
            ax.set_xlabel("dx")
            ax.set_ylabel("dy")
            ax.axhline(0, color="w", lw=0.5)
            ax.axvline(0, color="w", lw=0.5)
        fig.tight_layout()
        fig.savefig(out / f"motion_{name}.png", dpi=100)
        plt.close(fig)
    return csv_path


@dataclass
class EvalReport:
    active_dims: list[int]
    per_dim_kl: dict[int, float]
    per_part_iou: dict[str, float]
    dim_to_part: dict[int, str]
    unmatched_parts: list[str]
    hierarchy_match: bool | None
    hierarchy_diffs: list
    hierarchy_error: str | None
    files: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"active_dims = {','.join(str(d) for d in self.active_dims)}"]
        for dim, v in sorted(self.per_dim_kl.items()):
            lines.append(f"kl.dim{dim} = {v:.6f}")
        for name, v in self.per_part_iou.items():
            lines.append(f"iou.{name} = {v:.6f}")
        for dim, part in sorted(self.dim_to_part.items()):
            lines.append(f"dim_to_part.dim{dim} = {part}")
        if self.unmatched_parts:
            lines.append(f"unmatched_parts = {','.join(self.unmatched_parts)}")
        if self.hierarchy_match is not None:
            lines.append(f"hierarchy_match = {str(self.hierarchy_match).lower()}")
            for i, k, got, want in self.hierarchy_diffs:
                lines.append(f"hierarchy_diff = part{i}->part{k} got {got} want {want}")
            if self.hierarchy_error:
                lines.append(f"hierarchy_error = {self.hierarchy_error}")
        for key, value in self.files.items():
            lines.append(f"file.{key} = {value}")
        return "\n".join(lines) + "\n"


def mean_iou_matrix(model: PartsModel, frames: torch.Tensor,
                    gt_masks: list[list[np.ndarray]], dims: list[int],
                    mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Mean IoU of each (dim, part) pairing over an evaluation set."""
    n_parts = len(gt_masks[0])
    total = np.zeros((len(dims), n_parts), dtype=np.float64)
    for idx in range(len(frames)):
        for r, dim in enumerate(dims):
            pred = part_mask(model, frames[idx], dim, mask_threshold)
            for p in range(n_parts):
                total[r, p] += iou(pred, gt_masks[idx][p])
    return total / max(len(frames), 1)


def evaluate_segmentation(model: PartsModel, frames: torch.Tensor,
                          flows: torch.Tensor,
                          gt_masks: list[list[np.ndarray]],
                          names: list[str],
                          kl_threshold: float = DEFAULT_KL_THRESHOLD,
                          mask_threshold: float = DEFAULT_MASK_THRESHOLD,
                          gt_ancestors: np.ndarray | None = None) -> EvalReport:
    """Full segmentation + hierarchy scoring pass over an evaluation set."""
    kl = per_dim_kl(model, flows)
    dims = active_dims(model, flows, kl_threshold)
    report = EvalReport(
        active_dims=dims,
        per_dim_kl={int(i): float(v) for i, v in enumerate(kl)},
        per_part_iou={}, dim_to_part={}, unmatched_parts=list(names),
        hierarchy_match=None, hierarchy_diffs=[], hierarchy_error=None)
    if not dims:
        return report

    matrix = mean_iou_matrix(model, frames, gt_masks, dims, mask_threshold)
    assignment = match_dims_to_parts(matrix)
    part_to_dim_local = {}
    for row, part in assignment.dim_to_part.items():
        dim = dims[row]
        report.dim_to_part[dim] = names[part]
        report.per_part_iou[names[part]] = float(matrix[row, part])
        part_to_dim_local[part] = dim
    report.unmatched_parts = [names[p] for p in assignment.unmatched_parts]

    if gt_ancestors is not None and not assignment.unmatched_parts:
        order = [part_to_dim_local[p] for p in range(len(names))]
        result = hierarchy_accuracy(model.structure.matrix(), order, gt_ancestors)
        report.hierarchy_match = result.match
        report.hierarchy_diffs = result.diffs
        report.hierarchy_error = result.error
    return report
