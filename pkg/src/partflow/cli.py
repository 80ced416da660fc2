"""Command-line interface.

Commands: gen-data, train, eval, sample, report. Every command resolves a
RunConfig (config file < profile < flag overrides), archives it into the
run directory, and is reproducible from that archived config alone.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalkit, scenesim, viz
from .config import RunConfig, apply_profile
from .netblocks import PartsModel
from .scenesim import DatasetSpec
from .structure import binarize_structure, extract_hierarchy, hierarchy_to_text, structure_to_csv
from .training import (
    STAGE_DISENTANGLE,
    Trainer,
    TrainSettings,
    load_checkpoint,
    model_from_checkpoint,
)

MNIST_ENV_VAR = "PARTFLOW_MNIST"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (flat key = value lines)")
    parser.add_argument("--profile", choices=["desk", "paper"],
                        help="preset overrides applied after the config file")
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--seed", type=int)


_OVERRIDE_FLAGS = [
    ("--family", "family", str),
    ("--n-train", "n_train", int),
    ("--n-test", "n_test", int),
    ("--canvas", "canvas", int),
    ("--n-squares", "n_squares", int),
    ("--d", "d", int),
    ("--lr", "lr", float),
    ("--batch", "batch", int),
    ("--alpha", "alpha", float),
    ("--beta0", "beta0", float),
    ("--gamma0", "gamma0", float),
    ("--epochs-stage1", "epochs_stage1", int),
    ("--epochs-stage2", "epochs_stage2", int),
    ("--kl-threshold", "kl_threshold", float),
    ("--mask-threshold", "mask_threshold", float),
    ("--n-eval", "n_eval", int),
]


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    for flag, dest, typ in _OVERRIDE_FLAGS:
        parser.add_argument(flag, dest=dest, type=typ)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    config = apply_profile(config, args.profile)
    overrides = {}
    for _, dest, _ in _OVERRIDE_FLAGS + [("--seed", "seed", int), ("--out-dir", "out_dir", str)]:
        if hasattr(args, dest) and getattr(args, dest) is not None:
            overrides[dest] = getattr(args, dest)
    return config.with_overrides(**overrides)


def _archive_config(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.txt")


def _load_glyphs(args, config: RunConfig):
    if config.family != "digits6":
        return None
    path = getattr(args, "mnist", None) or os.environ.get(MNIST_ENV_VAR)
    if not path:
        raise SystemExit(
            f"family digits6 needs MNIST glyphs: pass --mnist DIR or set {MNIST_ENV_VAR}")
    return scenesim.load_mnist(path)


# -- commands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    _archive_config(config, out)
    glyphs = _load_glyphs(args, config)
    for split in ("train", "test"):
        spec = config.dataset_spec(split)
        manifest = scenesim.write_dataset(spec, out / split, glyphs=glyphs, progress=True)
        print(f"{split}: {spec.n_pairs} pairs ({spec.family}, "
              f"{spec.canvas[0]}x{spec.canvas[1]}) -> {manifest}")
    return 0


def _load_training_tensors(data_dir: Path, limit: int | None = None):
    from .training import tensors_from_arrays
    arrays = scenesim.load_dataset_arrays(data_dir, limit=limit)
    return tensors_from_arrays(arrays)


def _settings(config: RunConfig) -> TrainSettings:
    return TrainSettings(
        lr=config.lr, batch_size=config.batch, alpha=config.alpha,
        beta0=config.beta0, gamma0=config.gamma0, ema_decay=config.ema_decay,
        trigger_factor=config.trigger_factor, tighten_factor=config.tighten_factor,
        train_image_decoder_stage2=config.train_image_decoder_stage2)


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    _archive_config(config, out)
    data_dir = Path(args.data)
    data = _load_training_tensors(data_dir / "train" if (data_dir / "train").is_dir() else data_dir)

    model = PartsModel(d=config.d, resolution=config.canvas, unet_width=config.unet_width)
    stages = [1, 2] if args.stage == "both" else [int(args.stage)]

    trainer = Trainer(model, data, settings=_settings(config), seed=config.seed,
                      log_path=out / f"train_stage{stages[0]}.log")
    if args.resume:
        trainer.resume(args.resume)
        resumed_stage = 1 if trainer.state.stage == STAGE_DISENTANGLE else 2
        if resumed_stage not in stages:
            raise SystemExit(f"--resume checkpoint is stage {resumed_stage}, asked for {args.stage}")

    for stage in stages:
        trainer.log_path = out / f"train_stage{stage}.log"
        if stage == 1:
            if not args.resume or trainer.state is None:
                trainer.start_stage1()
            epochs = config.epochs_stage1
        else:
            if trainer.state is None or trainer.state.stage == STAGE_DISENTANGLE:
                init = args.init or (out / "stage1.ckpt")
                if not Path(init).exists():
                    raise SystemExit(
                        f"stage 2 needs a stage-1 checkpoint; none at {init} (use --init)")
                load_checkpoint(init, model=model)
                trainer.start_stage2()
            epochs = config.epochs_stage2

        def checkpoint_cb(tr: Trainer, record: dict, stage=stage):
            path = out / "checkpoints" / f"stage{stage}_epoch{tr.state.epoch}.ckpt"
            tr.save(path)
            print(f"stage {stage} epoch {tr.state.epoch}: loss {record['loss']:.4f} "
                  f"recon {record['recon']:.4f} beta {record['beta']:.3g} "
                  f"gamma {record['gamma']:.3g}")

        try:
            trainer.fit(epochs, callback=checkpoint_cb)
        except Exception as e:
            print(f"training aborted: {e}", file=sys.stderr)
            return 1
        trainer.save(out / f"stage{stage}.ckpt")
        args.resume = None
    return 0


def _load_eval_set(data_dir: Path, n_eval: int):
    pairs_root = Path(data_dir) / "pairs"
    dirs = sorted((p for p in pairs_root.iterdir() if p.is_dir()),
                  key=lambda p: int(p.name))[:n_eval]
    frames, flows, masks, ancestors = [], [], [], None
    for d in dirs:
        rec = scenesim.read_pair_dir(d)
        frames.append(rec["frame1"])
        flows.append(rec["flow"])
        masks.append(rec.get("masks"))
        if ancestors is None and "scene" in rec:
            ancestors = np.array(rec["scene"]["ancestor_matrix"], dtype=np.uint8)
    from .training import frames_to_tensor, flows_to_tensor
    return (frames_to_tensor(np.stack(frames)), flows_to_tensor(np.stack(flows)),
            masks, ancestors)


def cmd_eval(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    _archive_config(config, out)
    model, _ = model_from_checkpoint(args.checkpoint)
    if model.resolution != config.canvas:
        print(f"note: model resolution {model.resolution} overrides config canvas")

    data_dir = Path(args.data)
    test_dir = data_dir / "test" if (data_dir / "test").is_dir() else data_dir
    manifest = scenesim.spec_from_manifest(test_dir / "manifest")
    names = scenesim.part_names(manifest)
    frames, flows, masks, ancestors = _load_eval_set(test_dir, config.n_eval)
    if any(m is None for m in masks):
        raise SystemExit(f"{test_dir} has pairs without ground-truth masks; cannot score IoU")

    thresholds = [config.mask_threshold] if not args.mask_threshold_sweep else [
        float(t) for t in args.mask_threshold_sweep.split(",")]
    for threshold in thresholds:
        report = evalkit.evaluate_segmentation(
            model, frames, flows, masks, names,
            kl_threshold=config.kl_threshold, mask_threshold=threshold,
            gt_ancestors=ancestors)
        suffix = "" if len(thresholds) == 1 else f"_t{threshold:g}"
        if not report.active_dims:
            print("warning: no active dimensions (model collapsed)")
        # mask overlays + hierarchy export for the first frame
        frame0 = frames[0].permute(1, 2, 0).numpy()
        for dim in report.active_dims:
            mask = evalkit.part_mask(model, frames[0], dim, threshold)
            viz.save_image(out / f"mask_dim{dim}{suffix}.png",
                           viz.overlay_mask(frame0, mask))
        (out / f"structure{suffix}.csv").write_text(structure_to_csv(model.structure.matrix()))
        try:
            hierarchy = extract_hierarchy(
                binarize_structure(model.structure.matrix()), report.active_dims)
            labels = {d: report.dim_to_part.get(d, f"dim{d}") for d in report.active_dims}
            (out / f"hierarchy{suffix}.txt").write_text(hierarchy_to_text(hierarchy, labels))
        except Exception as e:
            (out / f"hierarchy{suffix}.txt").write_text(f"invalid structure: {e}\n")
        report.files["structure_csv"] = f"structure{suffix}.csv"
        report.files["hierarchy"] = f"hierarchy{suffix}.txt"
        metrics_path = out / f"metrics{suffix}.txt"
        metrics_path.write_text(report.to_text())
        print(f"threshold {threshold:g}:")
        print(report.to_text(), end="")
    return 0


def cmd_sample(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    _archive_config(config, out)
    model, _ = model_from_checkpoint(args.checkpoint)
    frame = scenesim.read_pair_dir(Path(args.image).parent)["frame1"] \
        if Path(args.image).name == "frame1.png" else None
    if frame is None:
        from PIL import Image
        frame = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    if frame.shape[:2] != (model.resolution, model.resolution):
        raise SystemExit(
            f"image is {frame.shape[1]}x{frame.shape[0]} but the model expects "
            f"{model.resolution}x{model.resolution}")
    frame_t = torch.from_numpy(frame.transpose(2, 0, 1)).float()
    frames, overall = evalkit.sample_future(model, frame_t, args.n, config.seed)
    images = [frame] + [f.permute(1, 2, 0).numpy() for f in frames]
    viz.save_image(out / "samples.png", viz.image_grid(images))
    max_mag = max(float(overall.abs().max()), 1e-6) if len(overall) else 1.0
    flow_imgs = [viz.flow_to_rgb(f.permute(1, 2, 0).numpy(), max_mag) for f in overall]
    if flow_imgs:
        viz.save_image(out / "sample_flows.png", viz.image_grid(flow_imgs))
    print(f"wrote {args.n} futures to {out / 'samples.png'}")
    return 0


def cmd_report(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir)
    _archive_config(config, out)
    model, _ = model_from_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    test_dir = data_dir / "test" if (data_dir / "test").is_dir() else data_dir
    frames, flows, _, _ = _load_eval_set(test_dir, config.n_eval)
    dims = evalkit.active_dims(model, flows, config.kl_threshold)
    if not dims:
        print("warning: no active dimensions (model collapsed)")
        return 1
    csv_path = evalkit.motion_distribution_report(
        model, frames[0], dims, n_samples=args.n_samples,
        rng_seed=config.seed, out_dir=out)
    print(f"motion report: {csv_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="partflow",
        description="Discover object parts, their hierarchy, and their dynamics from frame pairs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    _add_overrides(p)
    p.add_argument("--mnist", help=f"MNIST IDX directory (or ${MNIST_ENV_VAR})")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-stage optimization")
    _add_common(p)
    _add_overrides(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")
    p.add_argument("--resume", help="checkpoint to resume within a stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score segmentation and hierarchy recovery")
    _add_common(p)
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-threshold-sweep", help="comma-separated thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample future frames from one image")
    _add_common(p)
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input frame (png)")
    p.add_argument("--n", type=int, default=5)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("report", help="motion-distribution report for a trained model")
    _add_common(p)
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-samples", type=int, default=500)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
