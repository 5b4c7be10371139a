import dataclasses

import numpy as np
import pytest
import torch

from ttaseg.augment import AugmentConfig
from ttaseg.errors import ConfigError, NumericalAbort
from ttaseg.metrics import dice_loss, mean_foreground_dice
from ttaseg.networks import NetworkConfig, predict_volume
from ttaseg.synth import AnatomySpec, DomainSpec, StructureSpec, generate_anatomy, render_domain
from ttaseg.training import (
    NoiseConfig,
    TrainConfig,
    corrupt_labels,
    corrupt_labels_info,
    make_corrupted_validation_set,
    select_best_step,
    train_dae,
    train_segcnn,
)

AUG_OFF = AugmentConfig(prob=0.0)
NET = NetworkConfig(num_labels=3, norm_channels=4, seg_base_width=8, dae_base_width=8, levels=2)


def tiny_subjects(n, seed0=0, means=(0.1, 0.5, 0.9)):
    spec = AnatomySpec(
        num_labels=3,
        volume_shape=(16, 16, 16),
        spacing_mm=(1.0, 1.0, 1.0),
        structures=(
            StructureSpec((0.5, 0.4, 0.4), (1, 1), (3.5, 4.5), 1.0),
            StructureSpec((0.5, 0.65, 0.65), (1, 1), (3.0, 4.0), 1.0),
        ),
    )
    dom = DomainSpec("sd", means, (0.02, 0.02, 0.02), noise_std=0.01)
    out = []
    for i in range(n):
        lbl = generate_anatomy(dataclasses.replace(spec, seed=seed0 + i))
        img = render_domain(lbl, dom, seed=seed0 + 100 + i)
        out.append((np.array(img.data), np.array(lbl.data)))
    return out


# ---------------------------------------------------------------------------
# Corruption process
# ---------------------------------------------------------------------------

def test_zero_patches_is_identity(rng):
    lbl = rng.integers(0, 3, (10, 10, 10)).astype(np.uint8)
    out = corrupt_labels(lbl, NoiseConfig(max_patches=0, max_patch_edge=5), seed=1)
    np.testing.assert_array_equal(out, lbl)


def test_alphabet_closure_over_draws(rng):
    lbl = rng.integers(0, 4, (12, 12, 12)).astype(np.uint8)
    noise = NoiseConfig(max_patches=10, max_patch_edge=6)
    for seed in range(100):
        out = corrupt_labels(lbl, noise, seed)
        assert out.shape == lbl.shape
        assert set(np.unique(out)) <= set(np.unique(lbl))


def test_patch_count_follows_discrete_uniform_law():
    lbl = np.zeros((8, 8, 8), dtype=np.uint8)
    noise = NoiseConfig(max_patches=20, max_patch_edge=4)
    draws = 10_000
    counts = np.array([
        corrupt_labels_info(lbl, noise, seed)[1] for seed in range(draws)
    ])
    # discrete uniform on {0..20}: mean 10, var (21^2 - 1) / 12
    se = np.sqrt((21**2 - 1) / 12 / draws)
    assert abs(counts.mean() - 10.0) <= 3 * se
    assert counts.min() >= 0 and counts.max() <= 20


def test_corruption_deterministic_and_actually_corrupts(rng):
    lbl = rng.integers(0, 3, (16, 16, 16)).astype(np.uint8)
    noise = NoiseConfig(max_patches=15, max_patch_edge=8)
    a = corrupt_labels(lbl, noise, seed=3)
    b = corrupt_labels(lbl, noise, seed=3)
    np.testing.assert_array_equal(a, b)
    assert (a != lbl).any()


def test_corrupt_labels_accepts_labelmap(rng):
    from conftest import random_labelmap

    lbl = random_labelmap(rng)
    out = corrupt_labels(lbl, NoiseConfig(max_patches=5, max_patch_edge=3), seed=0)
    assert type(out) is type(lbl)
    assert out.num_labels == lbl.num_labels


# ---------------------------------------------------------------------------
# Checkpoint selection
# ---------------------------------------------------------------------------

def test_select_best_step_argmax_ties_earliest():
    history = [(10, 0.9, 0.5), (20, 0.8, 0.7), (30, 0.7, 0.7), (40, 0.6, 0.6)]
    assert select_best_step(history) == 20
    with pytest.raises(ValueError):
        select_best_step([])


# ---------------------------------------------------------------------------
# Segmenter training
# ---------------------------------------------------------------------------

def test_uniform_predictor_loss_matches_histogram_closed_form(rng):
    # zero logits give 1/K everywhere; soft dice over the pooled batch has a
    # closed form from the label histogram
    k_classes = 4
    lbl = rng.integers(0, k_classes, (2, 8, 8))
    one_hot = np.stack([(lbl == k).astype(np.float32) for k in range(k_classes)], axis=1)
    pred = torch.full((2, k_classes, 8, 8), 1.0 / k_classes)
    loss = dice_loss(pred, torch.from_numpy(one_hot)).item()

    n = lbl.size
    eps = 1e-6
    per_class = []
    for k in range(1, k_classes):
        n_k = (lbl == k).sum()
        inter = n_k / k_classes
        denom = n / k_classes**2 + n_k
        per_class.append((2 * inter + eps) / (denom + eps))
    assert loss == pytest.approx(1.0 - float(np.mean(per_class)), abs=1e-6)


def test_overfit_two_subjects():
    subjects = tiny_subjects(2)
    cfg = TrainConfig(batch_size=16, total_iterations=500, validation_every=100, seed=11)
    result = train_segcnn(subjects, subjects, NET, cfg, AUG_OFF)
    train_dice = []
    for img, lbl in subjects:
        probs = predict_volume(result.normalizer, result.segmenter, img, 8)
        pred = np.argmax(probs, axis=0).astype(np.uint8)
        train_dice.append(mean_foreground_dice(pred, lbl, 3))
    assert np.mean(train_dice) >= 0.90


def test_training_curves_reproducible():
    subjects = tiny_subjects(2)
    cfg = TrainConfig(batch_size=4, total_iterations=30, validation_every=10, seed=5)
    r1 = train_segcnn(subjects, subjects, NET, cfg, AugmentConfig())
    r2 = train_segcnn(subjects, subjects, NET, cfg, AugmentConfig())
    assert r1.history == r2.history
    assert r1.best_step == r2.best_step


def test_empty_split_rejected():
    with pytest.raises(ConfigError):
        train_segcnn([], tiny_subjects(1), NET, TrainConfig(total_iterations=1), AUG_OFF)


def test_non_finite_loss_aborts():
    subjects = tiny_subjects(1)
    poisoned = [(np.full_like(subjects[0][0], np.nan), subjects[0][1])]
    cfg = TrainConfig(batch_size=4, total_iterations=5, validation_every=5, seed=0)
    with pytest.raises(NumericalAbort, match="non-finite"):
        train_segcnn(poisoned, subjects, NET, cfg, AUG_OFF)


# ---------------------------------------------------------------------------
# DAE training
# ---------------------------------------------------------------------------

def test_corrupted_validation_set_size():
    labels = [np.zeros((8, 8, 8), dtype=np.uint8) for _ in range(3)]
    noise = NoiseConfig(max_patches=5, max_patch_edge=3, corruptions_per_validation_volume=10)
    pairs = make_corrupted_validation_set(labels, noise, seed=0)
    assert len(pairs) == 3 * 10


def test_train_dae_smoke_and_determinism():
    subjects = tiny_subjects(2)
    labels = [lbl for _, lbl in subjects]
    noise = NoiseConfig(max_patches=6, max_patch_edge=4, corruptions_per_validation_volume=2)
    cfg = TrainConfig(batch_size=1, total_iterations=8, validation_every=4, seed=3)
    r1 = train_dae(labels, labels, NET, cfg, noise, AUG_OFF)
    r2 = train_dae(labels, labels, NET, cfg, noise, AUG_OFF)
    assert r1.history == r2.history
    assert r1.best_step == select_best_step(r1.history)
