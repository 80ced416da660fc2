"""Loss assembly and the two-stage optimization schedule.

Stage "disentangle" trains everything except the structure logits with the
structural descriptor bypassed, ramping the KL weight beta; stage
"hierarchy" freezes the motion encoder and kernel decoder, zeroes beta,
and trains the structure logits (plus image encoder and motion decoder)
while ramping the local-motion penalty gamma. Both ramps double their
weight whenever the reconstruction EMA crosses an adaptive trigger.

Checkpoints are a flat versioned container (JSON header + raw little-
endian arrays) that round-trips bitwise, including optimizer moments,
schedule state, and RNG states.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .netblocks import PartsModel
from .structure import structure_penalty

STAGE_DISENTANGLE = "disentangle"
STAGE_HIERARCHY = "hierarchy"

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, message: str, batch_index: int, diagnostics: dict | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.diagnostics = diagnostics or {}


class CheckpointFormatError(RuntimeError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1e3
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


def _sample_l2(x: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm (root of summed squares over all elements)."""
    sq = x.pow(2).flatten(1).sum(dim=1)
    return torch.where(sq > 0, torch.sqrt(torch.clamp(sq, min=1e-38)), sq)


def loss_reconstruction(flow_pred: torch.Tensor, flow_gt: torch.Tensor,
                        frame2_pred: torch.Tensor, frame2_gt: torch.Tensor,
                        alpha: float) -> torch.Tensor:
    """||M - M_hat||_2 + alpha * ||I2 - I2_hat||_2, averaged over the batch."""
    if flow_pred.shape != flow_gt.shape:
        raise ValueError(f"flow shapes differ: {tuple(flow_pred.shape)} vs {tuple(flow_gt.shape)}")
    if frame2_pred.shape != frame2_gt.shape:
        raise ValueError(f"frame shapes differ: {tuple(frame2_pred.shape)} vs {tuple(frame2_gt.shape)}")
    return (_sample_l2(flow_pred - flow_gt)
            + alpha * _sample_l2(frame2_pred - frame2_gt)).mean()


def loss_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, var) || N(0, I)), summed over dims, averaged over the batch."""
    per_dim = 0.5 * (mean.pow(2) + torch.exp(logvar) - logvar - 1.0)
    return per_dim.sum(dim=1).mean()


def loss_total(recon: torch.Tensor, kl: torch.Tensor, struct: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    total = recon
    if weights.beta > 0:
        total = total + weights.beta * kl
    if weights.gamma > 0:
        total = total + weights.gamma * struct
    return total


@dataclass
class ScheduleState:
    """Adaptive-weight state for one stage."""

    stage: str
    beta: float
    gamma: float
    recon_ema: float | None = None
    trigger: float | None = None
    epoch: int = 0
    step: int = 0
    ema_decay: float = 0.99
    trigger_factor: float = 0.5
    tighten_factor: float = 0.8

    def __post_init__(self):
        if self.stage == STAGE_DISENTANGLE and self.gamma != 0:
            raise ValueError("disentangle stage requires gamma == 0")
        if self.stage == STAGE_HIERARCHY and self.beta != 0:
            raise ValueError("hierarchy stage requires beta == 0")

    def arm_trigger(self) -> None:
        """Set the first trigger from the initial-epoch reconstruction EMA."""
        if self.trigger is None and self.recon_ema is not None:
            self.trigger = self.trigger_factor * self.recon_ema

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleState":
        return cls(**d)


def adapt_weights(state: ScheduleState, recon_value: float) -> ScheduleState:
    """Update the reconstruction EMA; double the stage weight on a trigger crossing."""
    if state.recon_ema is None:
        state.recon_ema = recon_value
    else:
        state.recon_ema = state.ema_decay * state.recon_ema + (1 - state.ema_decay) * recon_value
    if state.trigger is not None and state.recon_ema < state.trigger:
        if state.stage == STAGE_DISENTANGLE:
            state.beta *= 2.0
        else:
            state.gamma *= 2.0
        state.trigger *= state.tighten_factor
    return state


@dataclass
class TrainSettings:
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    alpha: float = 1e3
    beta0: float = 0.1
    gamma0: float = 0.1
    ema_decay: float = 0.99
    trigger_factor: float = 0.5
    tighten_factor: float = 0.8
    train_image_decoder_stage2: bool = True
    channels_last: bool = True   # faster CPU convolutions; layout only


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2))).float()


def flows_to_tensor(flows: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(flows.transpose(0, 3, 1, 2))).float()


def tensors_from_arrays(arrays: dict) -> dict[str, torch.Tensor]:
    """Channel-first training tensors from a scenesim array dict."""
    return {
        "frame1": frames_to_tensor(arrays["frame1"]),
        "frame2": frames_to_tensor(arrays["frame2"]),
        "flow": flows_to_tensor(arrays["flow"]),
    }


class Trainer:
    """Single-owner training loop over a fixed in-memory dataset."""

    def __init__(self, model: PartsModel, data: dict[str, torch.Tensor],
                 settings: TrainSettings | None = None, seed: int = 0,
                 log_path: str | Path | None = None):
        self.model = model
        self.data = data
        self.settings = settings or TrainSettings()
        self.log_path = Path(log_path) if log_path else None
        self.noise_rng = torch.Generator().manual_seed(seed)
        self.data_rng = torch.Generator().manual_seed(seed + 1)
        self.state: ScheduleState | None = None
        self.optimizer: torch.optim.Adam | None = None
        self._frozen: list[nn.Module] = []
        if self.settings.channels_last:
            self.model.to(memory_format=torch.channels_last)
            self.data = {k: v.to(memory_format=torch.channels_last) if v.dim() == 4 else v
                         for k, v in data.items()}

    # -- stage setup ---------------------------------------------------

    def start_stage1(self) -> None:
        s = self.settings
        self.model.use_structure = False
        for p in self.model.parameters():
            p.requires_grad_(True)
        self.model.structure.logits.requires_grad_(False)
        self._frozen = [self.model.structure]
        self.optimizer = torch.optim.Adam(self._trainable(), lr=s.lr, betas=s.adam_betas)
        self.state = ScheduleState(
            stage=STAGE_DISENTANGLE, beta=s.beta0, gamma=0.0,
            ema_decay=s.ema_decay, trigger_factor=s.trigger_factor,
            tighten_factor=s.tighten_factor)

    def start_stage2(self) -> None:
        """Continue from stage-1 weights; optimizer moments start fresh."""
        s = self.settings
        self.model.use_structure = True
        for p in self.model.parameters():
            p.requires_grad_(True)
        self._frozen = [self.model.motion_encoder, self.model.kernel_decoder]
        if not s.train_image_decoder_stage2:
            self._frozen.append(self.model.image_decoder)
        for module in self._frozen:
            for p in module.parameters():
                p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self._trainable(), lr=s.lr, betas=s.adam_betas)
        self.state = ScheduleState(
            stage=STAGE_HIERARCHY, beta=0.0, gamma=s.gamma0,
            ema_decay=s.ema_decay, trigger_factor=s.trigger_factor,
            tighten_factor=s.tighten_factor)

    def _trainable(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def _set_modes(self) -> None:
        # Frozen modules stay in eval mode so BN running stats do not move.
        self.model.train()
        for module in self._frozen:
            module.eval()

    # -- steps ---------------------------------------------------------

    def step(self, batch_indices: torch.Tensor, batch_number: int) -> dict:
        if self.state is None:
            raise RuntimeError("call start_stage1/start_stage2 first")
        s, st = self.settings, self.state
        frame1 = self.data["frame1"][batch_indices]
        frame2 = self.data["frame2"][batch_indices]
        flow = self.data["flow"][batch_indices]

        noise = torch.randn(len(batch_indices), self.model.d, generator=self.noise_rng)
        out = self.model(frame1, flow, noise)
        recon = loss_reconstruction(out["overall"], flow, out["frame2"], frame2, s.alpha)
        kl = loss_kl(out["mean"], out["logvar"])
        struct = structure_penalty(out["locals"])
        weights = LossWeights(alpha=s.alpha, beta=st.beta, gamma=st.gamma)
        total = loss_total(recon, kl, struct, weights)

        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {st.epoch} batch {batch_number}",
                batch_index=batch_number,
                diagnostics={"recon": float(recon), "kl": float(kl),
                             "struct": float(struct),
                             "batch_indices": batch_indices.tolist()})

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        st.step += 1
        recon_v, kl_v, struct_v, total_v = (float(t.detach()) for t in (recon, kl, struct, total))
        adapt_weights(st, recon_v)
        record = {"epoch": st.epoch, "step": st.step, "loss": total_v,
                  "recon": recon_v, "kl": kl_v, "struct": struct_v,
                  "beta": st.beta, "gamma": st.gamma}
        self._log(record)
        return record

    def run_epoch(self) -> dict:
        self._set_modes()
        n = len(self.data["frame1"])
        order = torch.randperm(n, generator=self.data_rng)
        last: dict = {}
        bs = self.settings.batch_size
        for b in range(0, n - bs + 1, bs):
            last = self.step(order[b:b + bs], batch_number=b // bs)
        self.state.epoch += 1
        if self.state.trigger is None:
            self.state.arm_trigger()
        return last

    def fit(self, epochs: int, callback=None) -> None:
        for _ in range(epochs):
            record = self.run_epoch()
            if callback is not None:
                callback(self, record)

    def _log(self, r: dict) -> None:
        if self.log_path is None:
            return
        line = (f"{r['epoch']} {r['step']} {r['loss']:.6g} {r['recon']:.6g} "
                f"{r['kl']:.6g} {r['struct']:.6g} {r['beta']:.6g} {r['gamma']:.6g}\n")
        with open(self.log_path, "a") as fh:
            fh.write(line)

    # -- persistence ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, optimizer=self.optimizer,
                        schedule=self.state,
                        rng_states={"noise": self.noise_rng.get_state(),
                                    "data": self.data_rng.get_state()})

    def resume(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path, model=self.model)
        if ckpt.schedule is None:
            raise CheckpointFormatError(f"{path} has no schedule state")
        if ckpt.schedule.stage == STAGE_DISENTANGLE:
            self.start_stage1()
        else:
            self.start_stage2()
        self.state = ckpt.schedule
        ckpt.load_optimizer(self.optimizer)
        if "noise" in ckpt.rng_states:
            self.noise_rng.set_state(ckpt.rng_states["noise"])
        if "data" in ckpt.rng_states:
            self.data_rng.set_state(ckpt.rng_states["data"])


# -- checkpoint container ----------------------------------------------


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]
    schedule: ScheduleState | None = None
    rng_states: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def model_config(self) -> dict:
        return self.header["model_config"]

    def load_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        opt_meta = self.header.get("optimizer")
        if opt_meta is None or optimizer is None:
            return
        state: dict[int, dict] = {}
        for idx_str, keys in opt_meta["state_keys"].items():
            entry = {}
            for key in keys:
                arr = self.arrays[f"opt/{idx_str}/{key}"]
                entry[key] = torch.from_numpy(arr.copy())
            state[int(idx_str)] = entry
        optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})


def _tensor_to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_checkpoint(path: str | Path, model: PartsModel,
                    optimizer: torch.optim.Optimizer | None = None,
                    schedule: ScheduleState | None = None,
                    rng_states: dict[str, torch.Tensor] | None = None) -> None:
    """Write the versioned container; identical state writes identical bytes."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model/{name}"] = _tensor_to_array(tensor)

    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        state_keys = {}
        for idx, entry in sd["state"].items():
            keys = sorted(entry.keys())
            state_keys[str(idx)] = keys
            for key in keys:
                value = entry[key]
                if not isinstance(value, torch.Tensor):
                    value = torch.tensor(value)
                arrays[f"opt/{idx}/{key}"] = _tensor_to_array(value)
        opt_meta = {"state_keys": state_keys, "param_groups": sd["param_groups"]}

    for name, state in (rng_states or {}).items():
        arrays[f"rng/{name}"] = state.numpy()

    index = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        arrays[name] = arr
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.str, "offset": offset,
                      "nbytes": arr.nbytes})
        offset += arr.nbytes

    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config(),
        "use_structure": model.use_structure,
        "schedule": schedule.to_dict() if schedule is not None else None,
        "optimizer": opt_meta,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for entry in index:
            fh.write(arrays[entry["name"]].tobytes())


def load_checkpoint(path: str | Path, model: PartsModel | None = None) -> Checkpoint:
    """Read a container; when a model is given, restore its parameters."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + header_len].decode())
    payload = raw[16 + header_len:]

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        buf = payload[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointFormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()

    schedule = ScheduleState.from_dict(header["schedule"]) if header.get("schedule") else None
    rng_states = {name[len("rng/"):]: torch.from_numpy(arr.copy())
                  for name, arr in arrays.items() if name.startswith("rng/")}

    if model is not None:
        state_dict = {}
        for name, arr in arrays.items():
            if name.startswith("model/"):
                state_dict[name[len("model/"):]] = torch.from_numpy(arr.copy())
        model.load_state_dict(state_dict, strict=True)
        model.use_structure = header.get("use_structure", False)

    return Checkpoint(header=header, arrays=arrays, schedule=schedule,
                      rng_states=rng_states)


def model_from_checkpoint(path: str | Path, unet_width: int | None = None) -> tuple[PartsModel, Checkpoint]:
    """Rebuild a model from the stored config and load its weights."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.model_config
    model = PartsModel(d=cfg["d"], resolution=cfg["resolution"],
                       unet_width=unet_width or cfg["unet_width"])
    load_checkpoint(path, model=model)
    model.eval()
    return model, ckpt
