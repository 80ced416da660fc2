"""On-disk dataset layout.

    <root>/manifest                  spec fields + one line per pair with its seed
    <root>/pairs/<index>/frame1.png
                         frame2.png
                         flow.f32    raw little-endian float32, row-major,
                                     (dx, dy) interleaved per pixel
                         masks.png   indexed; 0 = background, k+1 = part k
                         scene.json

Externally produced data is ingested through the same layout: a pair dir
with user-supplied frames and flow.f32 (masks/scene optional) is accepted
verbatim.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import (
    DatasetSpec,
    ScenePair,
    pair_seed,
    render_pair,
    sample_scene,
    scene_to_dict,
)

MANIFEST_NAME = "manifest"


class DatasetIOError(RuntimeError):
    pass


def write_flow(path: str | Path, flow: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    Path(path).write_bytes(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    raw = Path(path).read_bytes()
    expected = h * w * 2 * 4
    if len(raw) != expected:
        raise DatasetIOError(f"{path}: {len(raw)} bytes, expected {expected} for {h}x{w} flow")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).copy()


def _save_frame(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)).save(path)


def _load_frame(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _save_masks(path: Path, pair: ScenePair) -> None:
    h, w = pair.scene.canvas
    index = np.zeros((h, w), dtype=np.uint8)
    palette = [0, 0, 0]
    for k, mask in enumerate(pair.masks):
        index[mask] = k + 1
        palette += [int(round(c * 255)) for c in pair.scene.parts[k].color]
    img = Image.fromarray(index, mode="P")
    img.putpalette(palette + [0] * (768 - len(palette)))
    img.save(path)


def read_masks(path: str | Path) -> list[np.ndarray]:
    index = np.asarray(Image.open(path))
    n = int(index.max())
    return [index == k + 1 for k in range(n)]


def write_pair_dir(pair: ScenePair, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _save_frame(out / "frame1.png", pair.frame1)
        _save_frame(out / "frame2.png", pair.frame2)
        write_flow(out / "flow.f32", pair.flow.values)
        _save_masks(out / "masks.png", pair)
        (out / "scene.json").write_text(
            json.dumps(scene_to_dict(pair.scene), sort_keys=True, indent=1) + "\n")
    except OSError as e:
        raise DatasetIOError(f"writing pair to {out}: {e}") from e


def read_pair_dir(pair_dir: str | Path) -> dict:
    """Load one pair directory; masks and scene metadata are optional."""
    d = Path(pair_dir)
    frame1 = _load_frame(d / "frame1.png")
    frame2 = _load_frame(d / "frame2.png")
    flow = read_flow(d / "flow.f32", frame1.shape[:2])
    out = {"frame1": frame1, "frame2": frame2, "flow": flow}
    if (d / "masks.png").exists():
        out["masks"] = read_masks(d / "masks.png")
    if (d / "scene.json").exists():
        out["scene"] = json.loads((d / "scene.json").read_text())
    return out


def _spec_to_lines(spec: DatasetSpec) -> list[str]:
    return [
        f"family = {spec.family}",
        f"n_pairs = {spec.n_pairs}",
        f"canvas = {spec.canvas[0]}x{spec.canvas[1]}",
        f"motion_lo = {spec.motion_magnitude_range[0]!r}",
        f"motion_hi = {spec.motion_magnitude_range[1]!r}",
        f"rng_seed = {spec.rng_seed}",
        f"n_squares = {spec.n_squares}",
    ]


def spec_from_manifest(path: str | Path) -> DatasetSpec:
    fields: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("pair ") or not line.strip():
            continue
        key, _, value = line.partition(" = ")
        fields[key.strip()] = value.strip()
    try:
        h, w = fields["canvas"].split("x")
        return DatasetSpec(
            family=fields["family"],
            n_pairs=int(fields["n_pairs"]),
            canvas=(int(h), int(w)),
            motion_magnitude_range=(float(fields["motion_lo"]), float(fields["motion_hi"])),
            rng_seed=int(fields["rng_seed"]),
            n_squares=int(fields.get("n_squares", 2)),
        )
    except KeyError as e:
        raise DatasetIOError(f"{path}: manifest missing field {e}") from e


def write_dataset(spec: DatasetSpec, out_dir: str | Path,
                  glyphs: dict[int, np.ndarray] | None = None,
                  progress: bool = False) -> Path:
    """Generate and write every pair; returns the manifest path."""
    root = Path(out_dir)
    pairs_root = root / "pairs"
    pairs_root.mkdir(parents=True, exist_ok=True)
    lines = _spec_to_lines(spec)
    for i in range(spec.n_pairs):
        scene = sample_scene(spec, i, glyphs=glyphs)
        write_pair_dir(render_pair(scene), pairs_root / str(i))
        lines.append(f"pair {i} seed {pair_seed(spec.rng_seed, i)}")
        if progress and (i + 1) % 500 == 0:
            print(f"  wrote {i + 1}/{spec.n_pairs} pairs")
    manifest = root / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset_arrays(root: str | Path, limit: int | None = None) -> dict:
    """Stack a dataset directory into training arrays (frames, flows)."""
    pairs_root = Path(root) / "pairs"
    if not pairs_root.is_dir():
        raise DatasetIOError(f"{pairs_root} does not exist; generate the dataset first")
    dirs = sorted((p for p in pairs_root.iterdir() if p.is_dir()), key=lambda p: int(p.name))
    if limit is not None:
        dirs = dirs[:limit]
    frames1, frames2, flows = [], [], []
    for d in dirs:
        rec = read_pair_dir(d)
        frames1.append(rec["frame1"])
        frames2.append(rec["frame2"])
        flows.append(rec["flow"])
    return {
        "frame1": np.stack(frames1),
        "frame2": np.stack(frames2),
        "flow": np.stack(flows),
    }
