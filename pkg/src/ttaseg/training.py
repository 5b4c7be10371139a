"""Supervised segmenter training, the label-corruption process, DAE training.

The segmenter run jointly optimizes the normalizer and segmenter on augmented
2D slice batches with the soft Dice loss; the denoiser run optimizes the 3D
DAE to map patch-copy-corrupted label volumes back to their clean versions.
Both select the checkpoint with the best validation score (argmax over the
recorded log, earliest step on ties) and abort on a non-finite loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment_labels, augment_pair
from .errors import ConfigError, NumericalAbort
from .grids import LabelMap
from .metrics import dice_loss, mean_foreground_dice
from .networks import (
    NetworkConfig,
    UNet,
    Normalizer,
    build_denoiser,
    build_normalizer,
    build_segmenter,
    denoise_volume,
    predict_volume,
)
from .seeds import derive_seed


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16  # slices per batch (2D); volumes per batch (3D)
    total_iterations: int = 50_000
    validation_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_iterations < 1 \
                or self.validation_every < 1:
            raise ValueError("training hyper-parameters must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    """Patch-copy corruption: patch count ~ U(0, max_patches), edge ~ U(0, max_patch_edge)."""

    max_patches: int = 200
    max_patch_edge: int = 20
    corruptions_per_validation_volume: int = 50

    def __post_init__(self):
        if min(self.max_patches, self.max_patch_edge, self.corruptions_per_validation_volume) < 0:
            raise ValueError("noise parameters must be non-negative")


def corrupt_labels_info(labels: np.ndarray, noise: NoiseConfig, seed: int):
    """Corrupt a label volume by copying random cubic patches within it.

    Returns ``(corrupted, num_patches)``. Patch count and edge follow discrete
    uniform laws over ``0..max``; patches are clipped at the volume borders.
    Copy-only, so the label alphabet can never grow.
    """
    rng = np.random.default_rng(seed)
    shape = labels.shape
    out = labels.copy()
    n_patches = int(rng.integers(0, noise.max_patches + 1))
    for _ in range(n_patches):
        edge = int(rng.integers(0, noise.max_patch_edge + 1))
        src = [int(rng.integers(0, s)) for s in shape]
        dst = [int(rng.integers(0, s)) for s in shape]
        if edge == 0:
            continue
        extent = [min(edge, shape[a] - src[a], shape[a] - dst[a]) for a in range(3)]
        patch = out[
            src[0]:src[0] + extent[0], src[1]:src[1] + extent[1], src[2]:src[2] + extent[2]
        ].copy()
        out[
            dst[0]:dst[0] + extent[0], dst[1]:dst[1] + extent[1], dst[2]:dst[2] + extent[2]
        ] = patch
    return out, n_patches


def corrupt_labels(labels, noise: NoiseConfig, seed: int):
    """Patch-copy corruption; accepts and returns either arrays or LabelMaps."""
    if isinstance(labels, LabelMap):
        out, _ = corrupt_labels_info(labels.data, noise, seed)
        return LabelMap(out, labels.spacing_mm, labels.num_labels)
    out, _ = corrupt_labels_info(np.asarray(labels), noise, seed)
    return out


def select_best_step(history) -> int:
    """Argmax over (step, ..., score) rows, earliest step on ties."""
    best_step, best = None, -np.inf
    for row in history:
        step, score = row[0], row[-1]
        if score > best:
            best, best_step = score, step
    if best_step is None:
        raise ValueError("empty history")
    return best_step


def one_hot_batch(labels: torch.Tensor, num_labels: int) -> torch.Tensor:
    """(B, ...) integer labels -> (B, K, ...) float one-hot."""
    oh = F.one_hot(labels.long(), num_labels)
    return oh.movedim(-1, 1).float()


@dataclass
class SegTrainResult:
    normalizer: Normalizer
    segmenter: UNet
    history: list = field(default_factory=list)  # (step, train_loss, val_dice)
    best_step: int = 0
    best_score: float = 0.0


@dataclass
class DaeTrainResult:
    denoiser: UNet
    history: list = field(default_factory=list)  # (step, train_loss, val_denoise_dice)
    best_step: int = 0
    best_score: float = 0.0


def _check_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalAbort(f"{what}: non-finite loss {loss.item()} at step {step}")


def _val_dice_segmenter(normalizer, segmenter, val_subjects, num_labels, batch_size) -> float:
    scores = []
    for img, lbl in val_subjects:
        probs = predict_volume(normalizer, segmenter, img, batch_size)
        pred = np.argmax(probs, axis=0).astype(np.uint8)
        scores.append(mean_foreground_dice(pred, lbl, num_labels))
    return float(np.mean(scores))


def train_segcnn(train_subjects, val_subjects, net_cfg: NetworkConfig,
                 cfg: TrainConfig, aug_cfg: AugmentConfig) -> SegTrainResult:
    """Jointly train normalizer + segmenter on 2D slices of the source domain.

    ``train_subjects`` / ``val_subjects`` are lists of ``(image, label)``
    canonical-grid arrays, ``(D, H, W)`` float32 / uint8. Returns the models
    at the best validation step.
    """
    if not train_subjects or not val_subjects:
        raise ConfigError("train_segcnn needs non-empty train and validation splits")
    torch.manual_seed(derive_seed(cfg.seed, "segcnn", "torch"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "segcnn", "data"))

    normalizer = build_normalizer(net_cfg)
    segmenter = build_segmenter(net_cfg)
    params = list(normalizer.parameters()) + list(segmenter.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    # flat (subject, slice) index for uniform slice sampling
    index = [(i, z) for i, (img, _) in enumerate(train_subjects) for z in range(img.shape[0])]
    history = []
    best_score, best_step, best_states = -np.inf, 0, None

    for step in range(1, cfg.total_iterations + 1):
        picks = rng.integers(0, len(index), size=cfg.batch_size)
        imgs = np.stack([train_subjects[index[p][0]][0][index[p][1]] for p in picks])
        lbls = np.stack([train_subjects[index[p][0]][1][index[p][1]] for p in picks])
        imgs, lbls = augment_pair(imgs, lbls, aug_cfg, derive_seed(cfg.seed, "segcnn", "aug", step))

        normalizer.train()
        segmenter.train()
        x = torch.from_numpy(imgs).unsqueeze(1)
        y = one_hot_batch(torch.from_numpy(lbls), net_cfg.num_labels)
        logits = segmenter(normalizer(x))
        loss = dice_loss(torch.softmax(logits, dim=1), y)
        _check_finite(loss, step, "segcnn training")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.validation_every == 0 or step == cfg.total_iterations:
            val = _val_dice_segmenter(normalizer, segmenter, val_subjects,
                                      net_cfg.num_labels, cfg.batch_size)
            history.append((step, float(loss.item()), val))
            if val > best_score:
                best_score, best_step = val, step
                best_states = (copy.deepcopy(normalizer.state_dict()),
                               copy.deepcopy(segmenter.state_dict()))

    normalizer.load_state_dict(best_states[0])
    segmenter.load_state_dict(best_states[1])
    normalizer.eval()
    segmenter.eval()
    assert best_step == select_best_step(history)
    return SegTrainResult(normalizer, segmenter, history, best_step, best_score)


def make_corrupted_validation_set(val_labels, noise: NoiseConfig, seed: int):
    """Pre-generate (corrupted, clean) pairs: each volume corrupted a fixed number of times."""
    pairs = []
    for i, lbl in enumerate(val_labels):
        for j in range(noise.corruptions_per_validation_volume):
            cor, _ = corrupt_labels_info(lbl, noise, derive_seed(seed, "valcorrupt", i, j))
            pairs.append((cor, lbl))
    return pairs


def _val_dice_denoiser(denoiser, val_pairs, num_labels) -> float:
    scores = []
    for cor, clean in val_pairs:
        k = np.arange(num_labels)
        one_hot = (cor[None] == k[:, None, None, None]).astype(np.float32)
        out = denoise_volume(denoiser, one_hot)
        pred = np.argmax(out, axis=0).astype(np.uint8)
        scores.append(mean_foreground_dice(pred, clean, num_labels))
    return float(np.mean(scores))


def train_dae(train_labels, val_labels, net_cfg: NetworkConfig, cfg: TrainConfig,
              noise: NoiseConfig, aug_cfg: AugmentConfig) -> DaeTrainResult:
    """Train the 3D denoiser to map corrupted label volumes to clean ones.

    Geometric-only augmentation is applied to each clean volume before
    corruption; the checkpoint is selected by denoising Dice on a corrupted
    validation set generated once up front.
    """
    if not train_labels or not val_labels:
        raise ConfigError("train_dae needs non-empty train and validation label sets")
    torch.manual_seed(derive_seed(cfg.seed, "dae", "torch"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "dae", "data"))

    denoiser = build_denoiser(net_cfg)
    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.learning_rate)
    val_pairs = make_corrupted_validation_set(val_labels, noise, derive_seed(cfg.seed, "dae", "val"))

    history = []
    best_score, best_step, best_state = -np.inf, 0, None
    k = np.arange(net_cfg.num_labels)

    for step in range(1, cfg.total_iterations + 1):
        clean_batch, corrupt_batch = [], []
        for b in range(cfg.batch_size):
            lbl = train_labels[int(rng.integers(0, len(train_labels)))]
            lbl = augment_labels(lbl, aug_cfg, derive_seed(cfg.seed, "dae", "aug", step, b))
            cor, _ = corrupt_labels_info(lbl, noise, derive_seed(cfg.seed, "dae", "corrupt", step, b))
            clean_batch.append(lbl)
            corrupt_batch.append(cor)
        clean = np.stack(clean_batch)
        cor = np.stack(corrupt_batch)
        x = torch.from_numpy((cor[:, None] == k[None, :, None, None, None]).astype(np.float32))
        y = torch.from_numpy((clean[:, None] == k[None, :, None, None, None]).astype(np.float32))

        denoiser.train()
        logits = denoiser(x)
        loss = dice_loss(torch.softmax(logits, dim=1), y)
        _check_finite(loss, step, "dae training")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.validation_every == 0 or step == cfg.total_iterations:
            val = _val_dice_denoiser(denoiser, val_pairs, net_cfg.num_labels)
            history.append((step, float(loss.item()), val))
            if val > best_score:
                best_score, best_step = val, step
                best_state = copy.deepcopy(denoiser.state_dict())

    denoiser.load_state_dict(best_state)
    denoiser.eval()
    assert best_step == select_best_step(history)
    return DaeTrainResult(denoiser, history, best_step, best_score)
