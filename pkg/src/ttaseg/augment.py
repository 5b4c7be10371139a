"""Per-volume intensity normalization and the stochastic training augmentations.

Geometric transforms (translation, rotation, scale, elastic, right-angle
rotations and flips) are applied identically to an image and its label map,
with linear interpolation for images and nearest-neighbor for labels;
intensity transforms (gamma, brightness, pixel noise) touch the image only.
Each transform fires independently with the configured probability. Transform
parameters are sampled once per sample, so the same parameter set can be
applied to image and label separately and must commute with the pairing.

Transform order when several fire: translate, rotate, scale, elastic,
right-angle rotation, flips, then gamma, brightness, noise. Out-of-frame
regions are filled with 0 (image) and background (label). Elastic
displacements use pixel units: smoothing a unit-amplitude noise field with a
Gaussian of the configured std and scaling it by the configured factor; with
the defaults (std 20, factor 1000) this yields displacements of roughly
+-10 px, and coordinates are clipped to stay inside the frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter, map_coordinates, shift as nd_shift, rotate as nd_rotate

from .grids import Volume


class DegenerateInputWarning(UserWarning):
    """Raised when a constant image is normalized (output is all zeros)."""


def percentile_normalize(v: Volume) -> Volume:
    """0-1 normalize: ``(x - p1) / (p99 - p1)``, clipped to [0, 1].

    Percentiles are taken over the whole 3D volume with the linear-interpolated
    percentile definition. A constant volume yields all zeros and a
    :class:`DegenerateInputWarning`.
    """
    p1, p99 = np.percentile(v.data, [1.0, 99.0])
    if p99 <= p1:
        warnings.warn(
            "constant image: percentile normalization returns all zeros",
            DegenerateInputWarning,
        )
        return Volume(np.zeros_like(v.data), v.spacing_mm)
    out = (v.data.astype(np.float64) - p1) / (p99 - p1)
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), v.spacing_mm)


@dataclass(frozen=True)
class AugmentConfig:
    prob: float = 0.25
    enable_translation: bool = True
    translation_px: tuple[float, float] = (-10.0, 10.0)
    enable_rotation: bool = True
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    enable_scale: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    enable_elastic: bool = True
    elastic_smooth_std: float = 20.0
    elastic_scale: float = 1000.0
    enable_right_angle: bool = False  # 90-degree rotations plus axis flips
    enable_gamma: bool = True
    gamma_range: tuple[float, float] = (0.5, 2.0)
    enable_brightness: bool = True
    brightness_range: tuple[float, float] = (0.0, 0.1)
    enable_noise: bool = True
    noise_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must lie in [0, 1], got {self.prob}")
        for name in ("translation_px", "rotation_deg", "scale_range", "gamma_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: ({lo}, {hi})")
        if self.noise_std < 0 or self.elastic_smooth_std <= 0 or self.elastic_scale < 0:
            raise ValueError("noise_std / elastic parameters out of range")


@dataclass(frozen=True)
class TransformParams:
    """One sampled transform set; ``None`` means the transform did not fire."""

    translation: tuple[float, float] | None = None
    rotation_deg: float | None = None
    scale: float | None = None
    elastic_disp: tuple[np.ndarray, np.ndarray] | None = None  # (dy, dx), pixels
    rot90_k: int | None = None
    flip_ud: bool = False
    flip_lr: bool = False
    gamma: float | None = None
    brightness: float | None = None
    noise: np.ndarray | None = None


def sample_transform(cfg: AugmentConfig, rng: np.random.Generator, shape) -> TransformParams:
    """Sample one parameter set for a 2D slice of the given shape."""
    fire = lambda enabled: enabled and rng.random() < cfg.prob

    translation = None
    if fire(cfg.enable_translation):
        translation = tuple(rng.uniform(*cfg.translation_px, size=2))
    rotation = float(rng.uniform(*cfg.rotation_deg)) if fire(cfg.enable_rotation) else None
    scale = float(rng.uniform(*cfg.scale_range)) if fire(cfg.enable_scale) else None

    elastic = None
    if fire(cfg.enable_elastic):
        disp = []
        for _ in range(2):
            noise = rng.uniform(-1.0, 1.0, size=shape)
            disp.append(gaussian_filter(noise, cfg.elastic_smooth_std, mode="reflect") * cfg.elastic_scale)
        elastic = (disp[0], disp[1])

    rot90_k = int(rng.integers(1, 4)) if fire(cfg.enable_right_angle) else None
    flip_ud = bool(fire(cfg.enable_right_angle) and rng.random() < 0.5)
    flip_lr = bool(fire(cfg.enable_right_angle) and rng.random() < 0.5)

    gamma = float(rng.uniform(*cfg.gamma_range)) if fire(cfg.enable_gamma) else None
    brightness = float(rng.uniform(*cfg.brightness_range)) if fire(cfg.enable_brightness) else None
    noise_field = None
    if fire(cfg.enable_noise):
        noise_field = rng.normal(0.0, cfg.noise_std, size=shape)

    return TransformParams(
        translation=translation,
        rotation_deg=rotation,
        scale=scale,
        elastic_disp=elastic,
        rot90_k=rot90_k,
        flip_ud=flip_ud,
        flip_lr=flip_lr,
        gamma=gamma,
        brightness=brightness,
        noise=noise_field,
    )


def _apply_geometric(arr: np.ndarray, p: TransformParams, order: int, cval) -> np.ndarray:
    out = arr
    if p.translation is not None:
        out = nd_shift(out, p.translation, order=order, mode="constant", cval=cval)
    if p.rotation_deg is not None:
        out = nd_rotate(out, p.rotation_deg, reshape=False, order=order, mode="constant", cval=cval)
    if p.scale is not None:
        center = (np.array(out.shape) - 1) / 2.0
        matrix = np.eye(2) / p.scale
        offset = center - matrix @ center
        out = affine_transform(out, matrix, offset=offset, order=order, mode="constant", cval=cval)
    if p.elastic_disp is not None:
        dy, dx = p.elastic_disp
        yy, xx = np.meshgrid(np.arange(out.shape[0]), np.arange(out.shape[1]), indexing="ij")
        coords = [
            np.clip(yy + dy, 0, out.shape[0] - 1),
            np.clip(xx + dx, 0, out.shape[1] - 1),
        ]
        out = map_coordinates(out, coords, order=order, mode="constant", cval=cval)
    if p.rot90_k is not None:
        out = np.rot90(out, p.rot90_k)
    if p.flip_ud:
        out = np.flipud(out)
    if p.flip_lr:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def apply_to_image(img: np.ndarray, p: TransformParams) -> np.ndarray:
    out = _apply_geometric(img.astype(np.float32), p, order=1, cval=0.0)
    if p.gamma is not None:
        out = np.clip(out, 0.0, None) ** p.gamma
    if p.brightness is not None:
        out = out + p.brightness
    if p.noise is not None:
        out = out + p.noise
    return out.astype(np.float32)


def apply_to_label(lbl: np.ndarray, p: TransformParams) -> np.ndarray:
    return _apply_geometric(lbl, p, order=0, cval=0)


def augment_pair(images: np.ndarray, labels: np.ndarray, cfg: AugmentConfig, seed: int):
    """Augment a batch of aligned (image, label) 2D slices.

    ``images``/``labels`` have shape ``(B, H, W)``; each sample gets its own
    sampled transform. Deterministic given ``seed``.
    """
    if images.shape != labels.shape:
        raise ValueError(f"image batch {images.shape} != label batch {labels.shape}")
    rng = np.random.default_rng(seed)
    out_i = np.empty_like(images, dtype=np.float32)
    out_l = np.empty_like(labels)
    for b in range(images.shape[0]):
        p = sample_transform(cfg, rng, images.shape[1:])
        out_i[b] = apply_to_image(images[b], p)
        out_l[b] = apply_to_label(labels[b], p)
    return out_i, out_l


def augment_labels(label: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Geometric-only augmentation of a 3D label volume.

    One in-plane transform is sampled and applied to every slice, keeping the
    3D structure coherent; nearest-neighbor interpolation preserves the label
    alphabet.
    """
    rng = np.random.default_rng(seed)
    p = sample_transform(cfg, rng, label.shape[1:])
    p = TransformParams(
        translation=p.translation,
        rotation_deg=p.rotation_deg,
        scale=p.scale,
        elastic_disp=p.elastic_disp,
        rot90_k=p.rot90_k,
        flip_ud=p.flip_ud,
        flip_lr=p.flip_lr,
    )
    out = np.empty_like(label)
    for z in range(label.shape[0]):
        out[z] = apply_to_label(label[z], p)
    return out
