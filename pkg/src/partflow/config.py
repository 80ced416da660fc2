"""Run configuration: flat key-value files with CLI overrides.

Every field defaults to the published hyperparameters where they exist
(d=32, lr=1e-3, batch=32, alpha=1e3, beta0=0.1, 128x128 canvas). The
"desk" profile shrinks everything to run on modest CPUs. A resolved
config is archived into every run directory, so any run is reproducible
from (config file, seed) alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .scenesim import DatasetSpec


@dataclass
class RunConfig:
    # dataset
    family: str = "shapes3"
    n_train: int = 100_000
    n_test: int = 10_000
    canvas: int = 128
    motion_lo: float = 1.0
    motion_hi: float = 4.0
    n_squares: int = 2
    # model
    d: int = 32
    unet_width: int = 32
    logvar_min: float = -10.0
    logvar_max: float = 10.0
    # training
    lr: float = 1e-3
    batch: int = 32
    alpha: float = 1e3
    beta0: float = 0.1
    gamma0: float = 0.1
    ema_decay: float = 0.99
    trigger_factor: float = 0.5
    tighten_factor: float = 0.8
    train_image_decoder_stage2: bool = True
    epochs_stage1: int = 50
    epochs_stage2: int = 25
    # eval
    kl_threshold: float = 0.1
    mask_threshold: float = 0.5
    n_eval: int = 64
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def dataset_spec(self, split: str = "train") -> DatasetSpec:
        n = self.n_train if split == "train" else self.n_test
        seed = self.seed if split == "train" else self.seed + 1
        return DatasetSpec(
            family=self.family, n_pairs=n, canvas=(self.canvas, self.canvas),
            motion_magnitude_range=(self.motion_lo, self.motion_hi),
            rng_seed=seed, n_squares=self.n_squares)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        values: dict[str, str] = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed config line {raw!r}")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values, source=str(path))

    @classmethod
    def from_mapping(cls, values: dict[str, str], source: str = "<args>") -> "RunConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"{source}: unknown config key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = raw.lower() in ("true", "1", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    def with_overrides(self, **overrides) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **clean)


DESK_PROFILE = dict(canvas=64, d=8, n_train=5_000, n_test=500,
                    unet_width=16, epochs_stage1=60, epochs_stage2=30)

PROFILES = {"desk": DESK_PROFILE, "paper": {}}


def apply_profile(config: RunConfig, profile: str | None) -> RunConfig:
    if profile is None:
        return config
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return config.with_overrides(**PROFILES[profile])
