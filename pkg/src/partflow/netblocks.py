"""The model's network components.

Seven pieces, wired as a conditional VAE over frame pairs: a motion
encoder (flow -> latent Gaussian), a per-dimension kernel decoder, an
image encoder, cross convolution (image features convolved channel-wise
with the decoded kernels), a motion decoder emitting one local motion
field per latent dimension, the structural descriptor (see structure.py),
and a flow-conditioned image decoder synthesizing the next frame.

Per-dimension isolation is architectural: every op between the latent and
the local motion fields is grouped by dimension, so local field k depends
on z_k and the input frame only.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .structure import StructureParams, compose_global, overall_motion

LOGVAR_CLAMP = (-10.0, 10.0)
KERNEL_SIZE = 5


def _require_power_of_two(resolution: int) -> int:
    n = int(math.log2(resolution))
    if 2 ** n != resolution or resolution < 8:
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
    return n


class MotionEncoder(nn.Module):
    """Flow field -> (mean, log-variance) of the latent motion code.

    Stride-2 convolutions reduce the input to 1x1; the stride count adapts
    to the configured resolution, with the final layer emitting 2d
    channels that split into mean and log-variance.
    """

    CHANNELS = (16, 16, 32, 32, 64, 64)

    def __init__(self, d: int, resolution: int):
        super().__init__()
        n_layers = _require_power_of_two(resolution)
        self.d = d
        layers = []
        in_ch = 2
        for i in range(n_layers):
            last = i == n_layers - 1
            pattern = self.CHANNELS[i] if i < len(self.CHANNELS) else self.CHANNELS[-1]
            out_ch = 2 * d if last else pattern
            layers.append(nn.Conv2d(in_ch, out_ch, KERNEL_SIZE, stride=2, padding=2))
            if not last:
                layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.LeakyReLU(0.2))
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, flow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(flow)
        if out.shape[-2:] != (1, 1):
            raise RuntimeError(f"encoder did not reduce to 1x1: {tuple(out.shape)}")
        out = out.flatten(1)
        mean, logvar = out[:, :self.d], out[:, self.d:]
        return mean, torch.clamp(logvar, *LOGVAR_CLAMP)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor,
                   noise: torch.Tensor) -> torch.Tensor:
    """z = mean + exp(logvar / 2) * noise."""
    return mean + torch.exp(0.5 * logvar) * noise


class KernelDecoder(nn.Module):
    """d separate MLPs decoding z_k into one 5x5 kernel each.

    Implemented with grouped 1x1 convolutions (groups = d) so kernel k is a
    function of z_k alone.
    """

    HIDDEN = (64, 128, 64)

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        widths = (1,) + self.HIDDEN + (KERNEL_SIZE * KERNEL_SIZE,)
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Conv1d(d * widths[i], d * widths[i + 1], 1, groups=d))
            if i < len(widths) - 2:
                layers.append(nn.BatchNorm1d(d * widths[i + 1]))
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.net(z.unsqueeze(-1))
        return out.view(z.shape[0], self.d, KERNEL_SIZE, KERNEL_SIZE)


class ImageEncoder(nn.Module):
    """Frame -> d-channel feature stack at full input resolution.

    Six 5x5 convolutions, two of them strided, then a 4x nearest-neighbor
    upsample back to the input resolution. The final layer emits exactly d
    channels: cross convolution needs one feature channel per kernel.
    """

    CHANNELS = (32, 32, 64, 64, 32)

    def __init__(self, d: int):
        super().__init__()
        layers = []
        in_ch = 3
        strided = {0, 2}
        for i, out_ch in enumerate(self.CHANNELS + (d,)):
            stride = 2 if i in strided else 1
            layers.append(nn.Conv2d(in_ch, out_ch, KERNEL_SIZE, stride=stride, padding=2))
            if i < len(self.CHANNELS):
                layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.ReLU())
            in_ch = out_ch
        self.net = nn.Sequential(*layers)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return F.interpolate(self.net(frame), scale_factor=4, mode="nearest")


def cross_convolution(features: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Convolve feature channel k with kernel k (per sample), same padding."""
    b, d, h, w = features.shape
    if kernels.shape[:2] != (b, d):
        raise ValueError(f"kernels {tuple(kernels.shape)} do not match features {tuple(features.shape)}")
    kh = kernels.shape[-1]
    out = F.conv2d(features.reshape(1, b * d, h, w),
                   kernels.reshape(b * d, 1, kh, kh),
                   padding=kh // 2, groups=b * d)
    return out.reshape(b, d, h, w)


class MotionDecoder(nn.Module):
    """Transformed features -> d local motion fields, (B, d, 2, H, W).

    Two depthwise branches (x and y displacement), each carrying one
    channel per latent dimension through 9x9, 5x5, and 1x1 layers. The
    final layers start zero-initialized so untrained local motions are 0.
    """

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.branch_x = self._branch(d)
        self.branch_y = self._branch(d)

    @staticmethod
    def _branch(d: int) -> nn.Sequential:
        sizes = (9, 9, 5, 5, 1, 1)
        layers = []
        for i, k in enumerate(sizes):
            layers.append(nn.Conv2d(d, d, k, padding=k // 2, groups=d))
            if i < len(sizes) - 1:
                layers.append(nn.BatchNorm2d(d))
                # leaky: a depthwise chain has one scalar path per channel,
                # so a hard ReLU can kill a whole dimension outright
                layers.append(nn.LeakyReLU(0.2))
        nn.init.zeros_(layers[-1].weight)
        nn.init.zeros_(layers[-1].bias)
        return nn.Sequential(*layers)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.branch_x(features), self.branch_y(features)], dim=2)


def warp_backward(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample frame at p - flow(p): a motion prior for the image decoder."""
    b, _, h, w = frame.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=frame.dtype, device=frame.device),
        torch.arange(w, dtype=frame.dtype, device=frame.device),
        indexing="ij")
    x = xs.unsqueeze(0) - flow[:, 0]
    y = ys.unsqueeze(0) - flow[:, 1]
    grid = torch.stack([2.0 * x / max(w - 1, 1) - 1.0,
                        2.0 * y / max(h - 1, 1) - 1.0], dim=-1)
    return F.grid_sample(frame, grid, mode="bilinear",
                         padding_mode="border", align_corners=True)


class _UNetDown(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.block(x)


class _UNetUp(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.skip_channels = skip_ch
        self.block = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
        )

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.block(torch.cat([x, skip], dim=1))


class ImageDecoder(nn.Module):
    """U-Net synthesizing the next frame from (frame, overall flow).

    The input stack is the frame, the flow, and the frame backward-warped
    by the flow (8 channels); the output passes through a sigmoid so
    predictions stay in [0, 1].
    """

    IN_CHANNELS = 8

    def __init__(self, resolution: int, base_width: int = 32, depth: int | None = None):
        super().__init__()
        levels = _require_power_of_two(resolution)
        self.depth = depth if depth is not None else min(3, levels - 2)
        widths = [base_width * (2 ** i) for i in range(self.depth + 1)]
        self.stem = nn.Sequential(
            nn.Conv2d(self.IN_CHANNELS, widths[0], 3, padding=1),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        self.down_blocks = nn.ModuleList(
            _UNetDown(widths[i], widths[i + 1]) for i in range(self.depth))
        self.up_blocks = nn.ModuleList(
            _UNetUp(widths[i + 1], widths[i], widths[i]) for i in reversed(range(self.depth)))
        self.head = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        x = torch.cat([frame, flow, warp_backward(frame, flow)], dim=1)
        stages = [self.stem(x)]
        for down in self.down_blocks:
            stages.append(down(stages[-1]))
        x = stages[-1]
        for i, up in enumerate(self.up_blocks):
            x = up(x, stages[self.depth - 1 - i])
        return torch.sigmoid(self.head(x))


class PartsModel(nn.Module):
    """Full pipeline tying the seven components together.

    ``use_structure`` selects whether the structural descriptor composes
    local motions into globals (hierarchy learning) or passes them through
    (disentanglement stage, ancestor matrix inert).
    """

    def __init__(self, d: int = 32, resolution: int = 128,
                 unet_width: int = 32, structure_logit_init: float = -2.0):
        super().__init__()
        self.d = d
        self.resolution = resolution
        self.motion_encoder = MotionEncoder(d, resolution)
        self.kernel_decoder = KernelDecoder(d)
        self.image_encoder = ImageEncoder(d)
        self.motion_decoder = MotionDecoder(d)
        self.structure = StructureParams(d, logit_init=structure_logit_init)
        self.image_decoder = ImageDecoder(resolution, base_width=unet_width)
        self.use_structure = False

    def config(self) -> dict:
        return {
            "d": self.d,
            "resolution": self.resolution,
            "unet_width": self.image_decoder.stem[0].out_channels,
        }

    def local_motions(self, frame1: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        features = self.image_encoder(frame1)
        kernels = self.kernel_decoder(z)
        transformed = cross_convolution(features, kernels)
        return self.motion_decoder(transformed)

    def decode(self, frame1: torch.Tensor, z: torch.Tensor) -> dict:
        """Latent + frame -> local/global/overall motions and the next frame."""
        locals_ = self.local_motions(frame1, z)
        if self.use_structure:
            globals_ = compose_global(locals_, self.structure.matrix())
        else:
            globals_ = locals_
        overall = overall_motion(globals_)
        frame2 = self.image_decoder(frame1, overall)
        return {"locals": locals_, "globals": globals_,
                "overall": overall, "frame2": frame2}

    def forward(self, frame1: torch.Tensor, flow: torch.Tensor,
                noise: torch.Tensor) -> dict:
        """Training pass: encode the observed flow, sample z, decode."""
        mean, logvar = self.motion_encoder(flow)
        z = reparameterize(mean, logvar, noise)
        out = self.decode(frame1, z)
        out.update({"mean": mean, "logvar": logvar, "z": z})
        return out

    def sample_prior(self, frame1: torch.Tensor,
                     generator: torch.Generator | None = None) -> dict:
        """Future sampling pass: z drawn from the standard-normal prior."""
        b = frame1.shape[0]
        z = torch.randn(b, self.d, generator=generator, dtype=frame1.dtype)
        out = self.decode(frame1, z)
        out["z"] = z
        return out
