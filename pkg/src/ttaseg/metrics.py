"""Dice loss and score, 95th-percentile Hausdorff distance, permutation test.

Definitions pinned here:

* Soft Dice loss (squared-denominator variant, eps = 1e-6), per class
  ``(2 * sum(p*q) + eps) / (sum(p^2) + sum(q^2) + eps)`` with sums pooled over
  the batch and spatial dimensions (the batch is scored as one volume); the
  loss is 1 minus the mean over foreground classes.
* Hard Dice ``2|A & B| / (|A| + |B|)``; two empty structures score 1.0.
* HD95 pools both directed boundary-to-boundary distance sets (physical mm)
  and takes the 95th percentile with the linear-interpolated percentile
  definition. A boundary voxel is a structure voxel with a face neighbor
  outside the structure, where out-of-volume counts as outside. If either
  structure is empty the distance is undefined (None).
* Paired permutation test on the mean difference, two-sided sign-flip; the
  identity permutation is always included in the count. When ``2**n <= n_perm``
  all sign patterns are enumerated exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from .grids import LabelMap

DICE_EPS = 1e-6


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Differentiable soft Dice loss over foreground classes.

    ``pred`` and ``target`` are ``(B, K, ...)`` tensors (probabilities or soft
    targets); class sums are pooled over batch and spatial dims.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.ndim < 3 or pred.shape[1] < 2:
        raise ValueError("expected (B, K, ...) tensors with K >= 2")
    dims = (0, *range(2, pred.ndim))
    inter = (pred * target).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims)
    per_class = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - per_class[1:].mean()


def dice_score(a: LabelMap | np.ndarray, b: LabelMap | np.ndarray, label: int) -> float:
    """Hard Dice for one label; defined as 1.0 when both structures are empty."""
    arr_a = a.data if isinstance(a, LabelMap) else np.asarray(a)
    arr_b = b.data if isinstance(b, LabelMap) else np.asarray(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch {arr_a.shape} vs {arr_b.shape}")
    ma = arr_a == label
    mb = arr_b == label
    na = int(ma.sum())
    nb = int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)


def mean_foreground_dice(a, b, num_labels: int) -> float:
    """Mean of :func:`dice_score` over labels ``1 .. num_labels-1``."""
    return float(np.mean([dice_score(a, b, k) for k in range(1, num_labels)]))


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    # border_value=0 makes voxels at the volume edge count as boundary
    interior = binary_erosion(mask, iterations=1, border_value=0)
    return np.argwhere(mask & ~interior)


def hd95(a, b, label: int, spacing_mm) -> float | None:
    """95th-percentile symmetric boundary distance in mm, or None if a side is empty."""
    arr_a = a.data if isinstance(a, LabelMap) else np.asarray(a)
    arr_b = b.data if isinstance(b, LabelMap) else np.asarray(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch {arr_a.shape} vs {arr_b.shape}")
    ma = arr_a == label
    mb = arr_b == label
    if not ma.any() or not mb.any():
        return None
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    pa = _boundary_voxels(ma) * spacing
    pb = _boundary_voxels(mb) * spacing
    d_ab = cKDTree(pb).query(pa, k=1)[0]
    d_ba = cKDTree(pa).query(pb, k=1)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95.0))


def permutation_test(x, y, n_perm: int = 100_000, seed: int = 0) -> float:
    """Two-sided paired permutation p-value for ``mean(x - y) != 0``.

    Sign-flip permutations of the paired differences; exhaustive enumeration
    of all ``2**n`` patterns when that many fit inside ``n_perm``, otherwise
    ``n_perm`` Monte-Carlo draws of which the first is the identity pattern.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired scores must be equal-length 1D arrays, got {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 pairs")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    d = x - y
    observed = abs(d.mean())

    if n <= 62 and 2**n <= n_perm:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
    else:
        rng = np.random.default_rng(seed)
        signs = rng.choice((1.0, -1.0), size=(n_perm, n))
        signs[0, :] = 1.0  # identity permutation always counted
    stats = np.abs((signs * d).mean(axis=1))
    return float(np.count_nonzero(stats >= observed) / signs.shape[0])


@dataclass
class MetricsRecord:
    """Per-subject evaluation result for one method."""

    subject: str
    domain: str
    method: str
    dice_per_label: dict[int, float]
    hd95_per_label: dict[int, float | None]
    flags: list[str] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice_per_label.values())))

    @property
    def mean_hd95(self) -> float | None:
        vals = [v for v in self.hd95_per_label.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def evaluate_pair(pred: LabelMap, truth: LabelMap, subject: str, domain: str, method: str) -> MetricsRecord:
    """Per-label Dice and HD95 of a prediction against ground truth."""
    if pred.shape != truth.shape:
        raise ValueError(f"{subject}: prediction shape {pred.shape} != truth shape {truth.shape}")
    dice = {}
    hd = {}
    flags = []
    for k in range(1, truth.num_labels):
        dice[k] = dice_score(pred, truth, k)
        h = hd95(pred, truth, k, truth.spacing_mm)
        hd[k] = h
        if h is None:
            flags.append(f"hd95_undefined_label{k}")
    return MetricsRecord(subject, domain, method, dice, hd, flags)
