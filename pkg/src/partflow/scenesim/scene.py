"""Procedural scene sampling with exact motion ground truth.

A scene is a forest of moving parts: every part carries a local motion
expressed in its parent's reference frame, and its on-screen (global)
motion is the sum of local motions along its root-to-part chain. Sampling
is a pure function of (dataset seed, pair index), so datasets regenerate
byte-identically.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .shapes import shape_mask

FAMILIES = ("shapes3", "shapes9", "digits6", "squares_generalization")

#: part templates per family: (kind, parent slot or None, motion rule)
#: rules: "diagonal" -> (+-s, +-s), "horizontal" -> (+-s, 0), "vertical" -> (0, +-s)
_FAMILY_TEMPLATES = {
    "shapes3": [
        ("circle", None, "diagonal"),
        ("triangle", 0, "horizontal"),
        ("square", 0, "vertical"),
    ],
    "shapes9": [
        # group 1: one-level tree
        ("square", None, "diagonal"),
        ("parallelogram_l", 0, "horizontal"),
        ("parallelogram_r", 0, "vertical"),
        # group 2: three-node chain
        ("circle", None, "diagonal"),
        ("triangle", 3, "horizontal"),
        ("triangle_d", 4, "vertical"),
        # group 3: two-node chain
        ("trapezoid_a", None, "diagonal"),
        ("trapezoid_b", 6, "horizontal"),
        # group 4: isolated root
        ("pentagon", None, "diagonal"),
    ],
    "digits6": [
        ("digit:0", None, "diagonal"),
        ("digit:1", 0, "horizontal"),
        ("digit:2", 0, "vertical"),
        ("digit:3", None, "diagonal"),
        ("digit:4", 3, "horizontal"),
        ("digit:5", 4, "vertical"),
    ],
}

MIN_VISIBLE_FRACTION = 0.3
MAX_PLACEMENT_ATTEMPTS = 100


class SceneGenerationError(RuntimeError):
    """Raised when a scene cannot be placed inside the canvas."""


@dataclass
class PartSpec:
    """One moving part: appearance, placement, and local motion."""

    kind: str
    size_px: int
    position: tuple[int, int]           # (x, y) of the bounding-box top-left
    color: tuple[float, float, float]
    z_order: int                        # higher occludes lower
    parent_index: int | None
    local_motion: tuple[float, float]   # (dx, dy) pixels/frame
    glyph_id: tuple[int, int] | None = None   # (digit class, index in class)
    glyph: np.ndarray | None = field(default=None, repr=False)

    def silhouette(self) -> np.ndarray:
        kind = "digit" if self.kind.startswith("digit") else self.kind
        return shape_mask(kind, self.size_px, self.glyph)


@dataclass
class SceneInstance:
    """A sampled scene: parts plus their ground-truth ancestor matrix."""

    parts: list[PartSpec]
    canvas: tuple[int, int]             # (H, W)
    ancestor_matrix: np.ndarray         # binary (n, n); [i, k] == 1 iff i is an ancestor of k
    rng_seed: int

    def global_motions(self) -> np.ndarray:
        """Per-part global motion: sum of local motions along the root path."""
        n = len(self.parts)
        out = np.zeros((n, 2), dtype=np.float64)
        for k, part in enumerate(self.parts):
            out[k] = part.local_motion
            p = part.parent_index
            while p is not None:
                out[k] += self.parts[p].local_motion
                p = self.parts[p].parent_index
        return out


@dataclass
class FlowField:
    """Per-pixel (dx, dy) motion map in pixels/frame."""

    values: np.ndarray                  # (H, W, 2) float32

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise ValueError(f"flow must be (H, W, 2), got {self.values.shape}")


@dataclass
class ScenePair:
    frame1: np.ndarray                  # (H, W, 3) float32 in [0, 1]
    frame2: np.ndarray
    flow: FlowField
    masks: list[np.ndarray]             # per-part boolean (H, W), occlusion-resolved
    scene: SceneInstance


@dataclass
class DatasetSpec:
    family: str
    n_pairs: int
    canvas: tuple[int, int] = (128, 128)
    motion_magnitude_range: tuple[float, float] = (1.0, 4.0)
    rng_seed: int = 0
    n_squares: int = 2                  # squares_generalization only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.motion_magnitude_range[0] <= 0:
            raise ValueError("motion magnitude lower bound must be > 0")
        if min(self.canvas) < 32:
            raise ValueError("canvas dims must be >= 32")


def family_templates(spec: DatasetSpec) -> list[tuple[str, int | None, str, str | None]]:
    """Part templates (kind, parent, rule, shared-motion group) for a spec."""
    if spec.family == "squares_generalization":
        parts = [
            ("circle", None, "diagonal", None),
            ("triangle", 0, "horizontal", None),
        ]
        parts += [("square", 0, "vertical", "squares")] * spec.n_squares
        return parts
    return [(k, p, r, None) for k, p, r in _FAMILY_TEMPLATES[spec.family]]


def pair_rng(dataset_seed: int, pair_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((dataset_seed, pair_index)))


def pair_seed(dataset_seed: int, pair_index: int) -> int:
    """Displayable per-pair seed recorded in manifests (audit only)."""
    state = np.random.SeedSequence((dataset_seed, pair_index)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def _sample_motion(rng: np.random.Generator, rule: str, lo: float, hi: float) -> tuple[float, float]:
    mag = float(rng.uniform(lo, hi))
    sx = float(rng.choice((-1.0, 1.0)))
    sy = float(rng.choice((-1.0, 1.0)))
    if rule == "diagonal":
        return (sx * mag, sy * mag)
    if rule == "horizontal":
        return (sx * mag, 0.0)
    if rule == "vertical":
        return (0.0, sy * mag)
    raise ValueError(f"unknown motion rule {rule!r}")


def _chain_sum(templates, locals_):
    n = len(templates)
    out = np.zeros((n, 2), dtype=np.float64)
    for k in range(n):
        out[k] = locals_[k]
        p = templates[k][1]
        while p is not None:
            out[k] += locals_[p]
            p = templates[p][1]
    return out


def _position_interval(lo_px: int, hi_px: int, size: int, shift: float) -> tuple[int, int]:
    # Bounding box must stay inside [lo_px, hi_px) in both frames; frame 2
    # renders at the rounded displacement, so bound by the stricter of the
    # real and rounded shift.
    rshift = int(np.rint(shift))
    low = max(lo_px, int(np.ceil(-min(shift, rshift))))
    high = min(hi_px - size, int(np.floor(hi_px - size - max(shift, rshift))))
    return low, high


def resolve_occlusion(scene: SceneInstance) -> np.ndarray:
    """Ownership map: each pixel belongs to the highest-z part covering it (-1 = background)."""
    h, w = scene.canvas
    owner = np.full((h, w), -1, dtype=np.int32)
    order = sorted(range(len(scene.parts)), key=lambda k: scene.parts[k].z_order)
    for k in order:  # ascending z; later (higher) stamps overwrite
        part = scene.parts[k]
        x, y = part.position
        sil = part.silhouette()
        region = owner[y:y + part.size_px, x:x + part.size_px]
        region[sil] = k
    return owner


def sample_scene(spec: DatasetSpec, pair_index: int,
                 glyphs: dict[int, np.ndarray] | None = None) -> SceneInstance:
    """Sample the scene for one dataset pair.

    Deterministic given (spec.rng_seed, pair_index). Digit families need a
    glyph set from ``load_mnist``. Raises SceneGenerationError when no
    placement keeps every part inside the canvas in both frames, or when
    occlusion leaves a part nearly invisible after bounded retries.
    """
    if pair_index >= spec.n_pairs:
        raise ValueError(f"pair_index {pair_index} out of range for n_pairs={spec.n_pairs}")
    templates = family_templates(spec)
    if any(k.startswith("digit") for k, *_ in templates) and glyphs is None:
        raise ValueError(f"family {spec.family!r} needs an MNIST glyph set")

    rng = pair_rng(spec.rng_seed, pair_index)
    h, w = spec.canvas
    lo, hi = spec.motion_magnitude_range
    n = len(templates)

    # Local motions; templates in a shared-motion group reuse one sample.
    locals_ = np.zeros((n, 2), dtype=np.float64)
    group_motion: dict[str, tuple[float, float]] = {}
    for k, (_, _, rule, group) in enumerate(templates):
        if group is not None and group in group_motion:
            locals_[k] = group_motion[group]
            continue
        m = _sample_motion(rng, rule, lo, hi)
        locals_[k] = m
        if group is not None:
            group_motion[group] = m
    globals_ = _chain_sum(templates, locals_)

    size_lo = max(4, min(h, w) // 8)
    size_hi = max(size_lo + 1, min(h, w) // 4)
    sizes = rng.integers(size_lo, size_hi, size=n, endpoint=True)
    colors = rng.uniform(0.15, 1.0, size=(n, 3))
    z_order = rng.permutation(n)

    parts: list[PartSpec] = []
    for k, (kind, parent, _, _) in enumerate(templates):
        glyph = None
        glyph_id = None
        if kind.startswith("digit"):
            cls = int(kind.split(":")[1])
            pool = glyphs[cls]
            gidx = int(rng.integers(len(pool)))
            glyph = pool[gidx]
            glyph_id = (cls, gidx)
            kind = "digit"
        parts.append(PartSpec(
            kind=kind,
            size_px=int(sizes[k]),
            position=(0, 0),
            color=tuple(float(c) for c in colors[k]),
            z_order=int(z_order[k]),
            parent_index=parent,
            local_motion=(float(locals_[k, 0]), float(locals_[k, 1])),
            glyph_id=glyph_id,
            glyph=glyph,
        ))

    ancestors = np.zeros((n, n), dtype=np.uint8)
    for k in range(n):
        p = templates[k][1]
        while p is not None:
            ancestors[p, k] = 1
            p = templates[p][1]
    scene = SceneInstance(parts=parts, canvas=(h, w),
                          ancestor_matrix=ancestors, rng_seed=spec.rng_seed)

    sils = [p.silhouette() for p in parts]
    areas = np.array([s.sum() for s in sils], dtype=np.float64)
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        for k, part in enumerate(parts):
            x_lo, x_hi = _position_interval(0, w, part.size_px, globals_[k, 0])
            y_lo, y_hi = _position_interval(0, h, part.size_px, globals_[k, 1])
            if x_lo > x_hi or y_lo > y_hi:
                raise SceneGenerationError(
                    f"pair {pair_index}: canvas {h}x{w} too small for part {k} "
                    f"(size {part.size_px}, motion {tuple(globals_[k])})")
            part.position = (int(rng.integers(x_lo, x_hi, endpoint=True)),
                             int(rng.integers(y_lo, y_hi, endpoint=True)))
        owner = resolve_occlusion(scene)
        visible = np.bincount(owner[owner >= 0], minlength=n)
        if np.all(visible >= MIN_VISIBLE_FRACTION * areas):
            return scene
    raise SceneGenerationError(
        f"pair {pair_index}: no placement with every part >= "
        f"{MIN_VISIBLE_FRACTION:.0%} visible after {MAX_PLACEMENT_ATTEMPTS} attempts")


def ground_truth_flow(scene: SceneInstance) -> FlowField:
    """Exact flow: each visible pixel of part k moves by k's global motion."""
    h, w = scene.canvas
    owner = resolve_occlusion(scene)
    globals_ = scene.global_motions()
    values = np.zeros((h, w, 2), dtype=np.float32)
    for k in range(len(scene.parts)):
        values[owner == k] = globals_[k].astype(np.float32)
    return FlowField(values=values)


def _stamp(frame: np.ndarray, part: PartSpec, sil: np.ndarray, x: int, y: int) -> None:
    region = frame[y:y + part.size_px, x:x + part.size_px]
    region[sil] = part.color


def render_pair(scene: SceneInstance) -> ScenePair:
    """Rasterize both frames, the flow field, and occlusion-resolved masks.

    Frame 2 draws every part at its position shifted by the rounded global
    motion; the flow keeps the real-valued motion.
    """
    h, w = scene.canvas
    globals_ = scene.global_motions()
    frame1 = np.zeros((h, w, 3), dtype=np.float32)
    frame2 = np.zeros((h, w, 3), dtype=np.float32)
    order = sorted(range(len(scene.parts)), key=lambda k: scene.parts[k].z_order)
    for k in order:
        part = scene.parts[k]
        sil = part.silhouette()
        x, y = part.position
        _stamp(frame1, part, sil, x, y)
        dx, dy = np.rint(globals_[k]).astype(int)
        _stamp(frame2, part, sil, x + dx, y + dy)
    owner = resolve_occlusion(scene)
    masks = [owner == k for k in range(len(scene.parts))]
    return ScenePair(frame1=frame1, frame2=frame2,
                     flow=ground_truth_flow(scene), masks=masks, scene=scene)


def scene_to_dict(scene: SceneInstance) -> dict:
    """JSON-ready metadata (glyph bitmaps are referenced by id, not stored)."""
    return {
        "canvas": list(scene.canvas),
        "rng_seed": scene.rng_seed,
        "ancestor_matrix": scene.ancestor_matrix.tolist(),
        "parts": [
            {
                "kind": p.kind,
                "size_px": p.size_px,
                "position": list(p.position),
                "color": list(p.color),
                "z_order": p.z_order,
                "parent_index": p.parent_index,
                "local_motion": list(p.local_motion),
                "glyph_id": list(p.glyph_id) if p.glyph_id is not None else None,
            }
            for p in scene.parts
        ],
    }


def part_names(spec: DatasetSpec) -> list[str]:
    """Stable per-part labels for reports (duplicates get a numeric suffix)."""
    names = []
    seen: dict[str, int] = {}
    for kind, *_ in family_templates(spec):
        base = kind.replace("digit:", "digit")
        count = seen.get(base, 0)
        seen[base] = count + 1
        names.append(base if count == 0 else f"{base}{count + 1}")
    return names
