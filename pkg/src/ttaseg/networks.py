"""The three networks: shallow residual normalizer, 2D segmenter, 3D denoiser.

The normalizer processes single-channel slices with a few stride-1
convolutions and adds the result to its input (global residual), so its
receptive field is exactly ``layers * (kernel - 1) + 1`` pixels and zeroing
the final layer makes it an identity map. Its activation is
``exp(-(x / sigma)^2)`` with one trainable ``sigma`` per channel, stored as
``log sigma`` to keep it positive.

Segmenter and denoiser are encoder-decoder networks with skip connections,
batch normalization, ReLU and bilinear / trilinear upsampling (no transposed
convolutions). The denoiser is 3D and maps K probability channels to K
logits on the same grid.

Checkpoints are a ``payload.pt`` tensor payload plus a ``manifest.json``
listing tensor names, shapes, dtypes, the global step and the validation
score; the manifest is the portable contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DependencyError

CHECKPOINT_PAYLOAD = "payload.pt"
CHECKPOINT_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class NetworkConfig:
    num_labels: int
    norm_channels: int = 16
    norm_kernel: int = 3
    norm_layers: int = 3
    seg_base_width: int = 16
    dae_base_width: int = 16
    levels: int = 3

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if min(self.norm_channels, self.norm_kernel, self.norm_layers,
               self.seg_base_width, self.dae_base_width, self.levels) < 1:
            raise ValueError("network sizes must be positive")


def gaussian_act(x, sigma):
    """``exp(-(x / sigma)^2)``: even, valued in (0, 1], peak 1 at x = 0."""
    if torch.is_tensor(sigma):
        if (sigma <= 0).any():
            raise ValueError("sigma must be > 0")
    elif sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if torch.is_tensor(x):
        return torch.exp(-((x / sigma) ** 2))
    return math.exp(-((x / sigma) ** 2))


class GaussianActivation(nn.Module):
    """Per-channel trainable-scale Gaussian bump activation."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_sigma = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        sigma = torch.exp(self.log_sigma).view(1, -1, *([1] * (x.ndim - 2)))
        return gaussian_act(x, sigma)


class Normalizer(nn.Module):
    """Shallow residual intensity-normalization net for single-channel slices."""

    def __init__(self, channels: int = 16, kernel: int = 3, layers: int = 3):
        super().__init__()
        if layers < 2:
            raise ValueError("need at least 2 layers for a hidden representation")
        self.channels = channels
        self.kernel = kernel
        self.layers = layers
        convs, acts = [], []
        in_ch = 1
        for i in range(layers):
            out_ch = 1 if i == layers - 1 else channels
            convs.append(nn.Conv2d(in_ch, out_ch, kernel, stride=1, padding=kernel // 2))
            if i < layers - 1:
                acts.append(GaussianActivation(out_ch))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.acts = nn.ModuleList(acts)
        # start as an exact identity: the even activation can otherwise fold
        # distant intensities together at init, a locally stable collapse
        self.zero_final_layer()

    @property
    def receptive_field(self) -> int:
        return self.layers * (self.kernel - 1) + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected single-channel (B, 1, H, W) input, got {tuple(x.shape)}")
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.acts):
                h = self.acts[i](h)
        return x + h

    def zero_final_layer(self) -> None:
        """Make the residual branch vanish, turning the net into an exact identity."""
        with torch.no_grad():
            self.convs[-1].weight.zero_()
            self.convs[-1].bias.zero_()


class _ConvBlock(nn.Module):
    def __init__(self, dim: int, in_ch: int, out_ch: int):
        super().__init__()
        conv = nn.Conv2d if dim == 2 else nn.Conv3d
        bn = nn.BatchNorm2d if dim == 2 else nn.BatchNorm3d
        self.c1 = conv(in_ch, out_ch, 3, padding=1)
        self.b1 = bn(out_ch)
        self.c2 = conv(out_ch, out_ch, 3, padding=1)
        self.b2 = bn(out_ch)

    def forward(self, x):
        x = F.relu(self.b1(self.c1(x)))
        return F.relu(self.b2(self.c2(x)))


class UNet(nn.Module):
    """Encoder-decoder with skips; ``levels`` resolution scales."""

    def __init__(self, dim: int, in_channels: int, num_classes: int,
                 base_width: int = 16, levels: int = 3):
        super().__init__()
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if levels < 2:
            raise ValueError("need at least 2 resolution levels")
        self.dim = dim
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.levels = levels
        widths = [base_width * 2**i for i in range(levels)]
        encs = []
        prev = in_channels
        for w in widths:
            encs.append(_ConvBlock(dim, prev, w))
            prev = w
        self.encoders = nn.ModuleList(encs)
        self.decoders = nn.ModuleList(
            [_ConvBlock(dim, widths[i + 1] + widths[i], widths[i]) for i in reversed(range(levels - 1))]
        )
        head_conv = nn.Conv2d if dim == 2 else nn.Conv3d
        self.head = head_conv(widths[0], num_classes, 1)
        self._pool = F.max_pool2d if dim == 2 else F.max_pool3d
        self._up_mode = "bilinear" if dim == 2 else "trilinear"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != self.dim + 2 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B, {self.in_channels}, {'H, W' if self.dim == 2 else 'D, H, W'}) input, "
                f"got {tuple(x.shape)}"
            )
        div = 2 ** (self.levels - 1)
        if any(s % div for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {div}")
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            h = enc(h)
            if i < self.levels - 1:
                skips.append(h)
                h = self._pool(h, 2)
        for dec in self.decoders:
            h = F.interpolate(h, scale_factor=2, mode=self._up_mode, align_corners=False)
            h = dec(torch.cat([h, skips.pop()], dim=1))
        return self.head(h)


def build_normalizer(cfg: NetworkConfig) -> Normalizer:
    return Normalizer(cfg.norm_channels, cfg.norm_kernel, cfg.norm_layers)


def build_segmenter(cfg: NetworkConfig) -> UNet:
    return UNet(2, 1, cfg.num_labels, cfg.seg_base_width, cfg.levels)


def build_denoiser(cfg: NetworkConfig) -> UNet:
    return UNet(3, cfg.num_labels, cfg.num_labels, cfg.dae_base_width, cfg.levels)


# ---------------------------------------------------------------------------
# Volume-level inference
# ---------------------------------------------------------------------------

def slice_batches(depth: int, batch_size: int):
    """Successive-slice index ranges covering ``0 .. depth``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [(lo, min(lo + batch_size, depth)) for lo in range(0, depth, batch_size)]


def predict_volume(normalizer: Normalizer, segmenter: UNet, vol: np.ndarray,
                   batch_size: int) -> np.ndarray:
    """Full-volume class probabilities ``(K, D, H, W)`` from a ``(D, H, W)`` image.

    Runs the slice batches through normalizer + segmenter in inference mode.
    """
    dtype = next(segmenter.parameters()).dtype
    was_training = (normalizer.training, segmenter.training)
    normalizer.eval()
    segmenter.eval()
    outs = []
    with torch.no_grad():
        for lo, hi in slice_batches(vol.shape[0], batch_size):
            x = torch.from_numpy(np.array(vol[lo:hi])).to(dtype).unsqueeze(1)
            probs = torch.softmax(segmenter(normalizer(x)), dim=1)
            outs.append(probs)
    normalizer.train(was_training[0])
    segmenter.train(was_training[1])
    stacked = torch.cat(outs, dim=0)  # (D, K, H, W)
    return stacked.permute(1, 0, 2, 3).numpy().astype(np.float32)


def denoise_volume(denoiser: UNet, probs: np.ndarray) -> np.ndarray:
    """Pass a ``(K, D, H, W)`` probability volume through the denoiser (no grad)."""
    if probs.shape[0] != denoiser.in_channels:
        raise ValueError(
            f"probability volume has {probs.shape[0]} channels, denoiser expects {denoiser.in_channels}"
        )
    dtype = next(denoiser.parameters()).dtype
    was_training = denoiser.training
    denoiser.eval()
    with torch.no_grad():
        # np.array copies: probability buffers may be read-only container data
        x = torch.from_numpy(np.array(probs)).to(dtype).unsqueeze(0)
        out = torch.softmax(denoiser(x), dim=1)[0]
    denoiser.train(was_training)
    return out.numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def architecture_manifest(models: dict[str, nn.Module]) -> dict:
    """Tensor names / shapes / dtypes plus trainable parameter counts."""
    tensors = []
    param_counts = {}
    for mname in sorted(models):
        m = models[mname]
        for tname, t in m.state_dict().items():
            tensors.append(
                {
                    "name": f"{mname}.{tname}",
                    "shape": list(t.shape),
                    "dtype": str(t.dtype).replace("torch.", ""),
                }
            )
        param_counts[mname] = sum(p.numel() for p in m.parameters() if p.requires_grad)
    return {"tensors": tensors, "trainable_params": param_counts}


def save_checkpoint(ckpt_dir, models: dict[str, nn.Module], step: int,
                    val_score: float, extra: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    payload = {name: m.state_dict() for name, m in models.items()}
    torch.save(payload, ckpt_dir / CHECKPOINT_PAYLOAD)
    manifest = architecture_manifest(models)
    manifest["global_step"] = int(step)
    manifest["val_score"] = float(val_score)
    if extra:
        manifest.update(extra)
    with open(ckpt_dir / CHECKPOINT_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir, models: dict[str, nn.Module]) -> dict:
    """Load tensors into ``models`` in place and return the manifest."""
    ckpt_dir = Path(ckpt_dir)
    payload_path = ckpt_dir / CHECKPOINT_PAYLOAD
    manifest_path = ckpt_dir / CHECKPOINT_MANIFEST
    for p in (payload_path, manifest_path):
        if not p.exists():
            raise DependencyError(f"missing checkpoint file: {p}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    payload = torch.load(payload_path, map_location="cpu", weights_only=True)
    for name, m in models.items():
        if name not in payload:
            raise DependencyError(f"{payload_path} holds no tensors for {name!r}")
        m.load_state_dict(payload[name])
    return manifest
