"""Per-image test-time adaptation of the normalizer, driven by the 3D DAE.

For one preprocessed test volume the loop alternates two steps. Refresh: run
the full volume through normalizer + segmenter in successive slice batches,
assemble the 3D soft prediction, pass it through the denoiser (no gradient)
and freeze the resulting target (or the atlas / ground truth, depending on the
mode and the switching rule). Update: sweep the slice batches once, accumulate
Dice-loss gradients with respect to the normalizer parameters against the
frozen target, average over the number of batches and apply a single Adam
update. The target is refreshed every ``refresh_every`` updates.

At every refresh the agreement between denoiser input and output (mean
foreground Dice of the argmax maps) is recorded; the parameters kept at the
end are those of the refresh with the highest such agreement (earliest on
ties). Batch-norm statistics of the frozen networks stay in inference mode
throughout, which is what makes the accumulated sweep gradient equal the
gradient of the mean whole-volume loss.

For large domain shifts the target switches between denoiser output and a
probabilistic atlas: the denoiser drives the adaptation only once its output
agrees enough with its input relative to the atlas (ratio >= alpha) and the
prediction overlaps the atlas at all (>= beta); otherwise the atlas does.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericalAbort
from .grids import GridRecord, LabelMap, ProbMap, restore_to_original
from .metrics import dice_loss, mean_foreground_dice
from .networks import UNet, Normalizer, denoise_volume, predict_volume, slice_batches
from .seeds import derive_seed

MODES = ("dae", "dae+atlas", "adapt-all", "oracle", "none")

TARGET_DAE = "dae"
TARGET_ATLAS = "atlas"
TARGET_GT = "gt"


@dataclass(frozen=True)
class TTAConfig:
    total_updates: int = 500  # paper scale: 500 brain / 7500 prostate+cardiac
    refresh_every: int = 25
    batch_size: int = 16
    learning_rate: float = 1e-3
    dae_over_atlas_min: float = 1.0  # switch ratio threshold
    atlas_dice_min: float = 0.25  # switch floor threshold
    mode: str = "dae"
    warm_start: str = "none"  # none | first-subject
    fast_total_updates: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode != "none" and self.total_updates < 1:
            raise ValueError("total_updates must be > 0")
        if self.refresh_every < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("refresh_every / batch_size / learning_rate must be positive")
        if self.dae_over_atlas_min <= 0 or not 0.0 <= self.atlas_dice_min <= 1.0:
            raise ValueError("switch thresholds out of range")
        if self.warm_start not in ("none", "first-subject"):
            raise ValueError(f"unknown warm_start {self.warm_start!r}")
        if self.fast_total_updates < 1:
            raise ValueError("fast_total_updates must be > 0")


@dataclass
class TraceRow:
    iteration: int
    target_source: str
    d_dae: float
    d_atlas: float | None = None
    d_gt: float | None = None


@dataclass
class TTATrace:
    rows: list[TraceRow] = field(default_factory=list)
    best_iteration: int = 0

    @property
    def initial_d_dae(self) -> float:
        return self.rows[0].d_dae

    @property
    def best_d_dae(self) -> float:
        return max(r.d_dae for r in self.rows)

    def reselect_best(self) -> int:
        """Recompute the best refresh from the stored rows (earliest on ties)."""
        best, best_it = -np.inf, None
        for r in self.rows:
            if r.d_dae > best:
                best, best_it = r.d_dae, r.iteration
        return best_it

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "target_source", "d_dae", "d_atlas", "d_gt"])
            for r in self.rows:
                w.writerow([
                    r.iteration,
                    r.target_source,
                    repr(r.d_dae),
                    "" if r.d_atlas is None else repr(r.d_atlas),
                    "" if r.d_gt is None else repr(r.d_gt),
                ])

    @staticmethod
    def read_csv(path, best_iteration: int = 0) -> "TTATrace":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(TraceRow(
                    iteration=int(rec["iteration"]),
                    target_source=rec["target_source"],
                    d_dae=float(rec["d_dae"]),
                    d_atlas=float(rec["d_atlas"]) if rec["d_atlas"] else None,
                    d_gt=float(rec["d_gt"]) if rec["d_gt"] else None,
                ))
        return TTATrace(rows, best_iteration)


@dataclass
class AdaptResult:
    prediction: LabelMap  # on the original grid
    trace: TTATrace
    normalizer: Normalizer  # adapted copy
    segmenter: UNet  # adapted copy in adapt-all mode, frozen copy otherwise
    canonical_probs: np.ndarray  # (K, D, H, W) soft prediction at the best refresh


def build_atlas(labels) -> ProbMap:
    """Voxel-wise average of one-hot label maps on a common grid."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one label map")
    first = labels[0]
    for l in labels[1:]:
        if l.shape != first.shape or l.spacing_mm != first.spacing_mm or l.num_labels != first.num_labels:
            raise ValueError("atlas inputs must share grid and label alphabet")
    counts = np.zeros((first.num_labels,) + first.shape, dtype=np.float64)
    for l in labels:
        counts += l.one_hot(dtype=np.float64)
    return ProbMap((counts / len(labels)).astype(np.float32), first.spacing_mm)


def switching_rule(d_dae: float, d_atlas: float, ratio_min: float, atlas_min: float) -> str:
    """Pick the adaptation target: denoiser output or atlas.

    Denoiser wins iff ``d_dae / d_atlas >= ratio_min`` and
    ``d_atlas >= atlas_min``. A zero atlas overlap with a nonzero numerator
    counts for the denoiser (the ratio is unbounded there).
    """
    if d_atlas <= 0.0:
        return TARGET_DAE if d_dae > 0.0 else TARGET_ATLAS
    if d_dae / d_atlas >= ratio_min and d_atlas >= atlas_min:
        return TARGET_DAE
    return TARGET_ATLAS


def choose_target(z_c: ProbMap, dae_out: ProbMap, atlas: ProbMap,
                  ratio_min: float, atlas_min: float) -> str:
    """Apply the switching rule to soft maps via their argmax Dice agreements."""
    pred = z_c.argmax()
    d_dae = mean_foreground_dice(pred, dae_out.argmax(), z_c.num_labels)
    d_atlas = mean_foreground_dice(pred, atlas.argmax(), z_c.num_labels)
    return switching_rule(d_dae, d_atlas, ratio_min, atlas_min)


def sweep_gradients(normalizer: Normalizer, segmenter: UNet, vol: torch.Tensor,
                    target: torch.Tensor, batch_size: int, params) -> float:
    """One gradient-accumulation sweep over successive slice batches.

    Accumulates ``grad(mean over batches of per-batch Dice loss)`` into
    ``params`` (gradients must be zeroed by the caller) and returns that mean
    loss. ``vol`` is ``(D, H, W)``, ``target`` is ``(K, D, H, W)``.
    """
    batches = slice_batches(vol.shape[0], batch_size)
    total = 0.0
    for lo, hi in batches:
        x = vol[lo:hi].unsqueeze(1)
        tgt = target[:, lo:hi].permute(1, 0, 2, 3)
        probs = torch.softmax(segmenter(normalizer(x)), dim=1)
        loss = dice_loss(probs, tgt)
        (loss / len(batches)).backward()
        total += float(loss.item())
    return total / len(batches)


def _mean_fg(pred_hard: np.ndarray, other_hard: np.ndarray, num_labels: int) -> float:
    return mean_foreground_dice(pred_hard, other_hard, num_labels)


def adapt(image: np.ndarray, record: GridRecord, segmenter: UNet,
          normalizer_init: dict, denoiser: UNet, atlas: ProbMap | None,
          cfg: TTAConfig, gt: np.ndarray | None = None,
          update_callback=None) -> AdaptResult:
    """Adapt the normalizer to one canonical-grid test image.

    ``image`` is the preprocessed ``(D, H, W)`` volume, ``normalizer_init`` a
    normalizer state dict (the source-domain parameters or a warm start),
    ``gt`` an optional canonical ground-truth label volume (required for
    oracle mode, otherwise only logged). Returns the adapted normalizer, the
    per-refresh trace and the prediction mapped back to the original grid.
    """
    if cfg.mode == "dae+atlas" and atlas is None:
        raise ConfigError("mode 'dae+atlas' needs an atlas")
    if cfg.mode == "oracle" and gt is None:
        raise ConfigError("mode 'oracle' needs ground-truth labels")

    num_labels = segmenter.num_classes
    # fresh copies so the caller's models are never mutated
    segmenter = copy.deepcopy(segmenter)
    normalizer = _normalizer_from_state(normalizer_init)
    segmenter.eval()
    normalizer.eval()
    denoiser.eval()

    adapt_params = list(normalizer.parameters())
    for p in segmenter.parameters():
        p.requires_grad_(cfg.mode == "adapt-all")
    if cfg.mode == "adapt-all":
        adapt_params += list(segmenter.parameters())
    opt = torch.optim.Adam(adapt_params, lr=cfg.learning_rate)

    atlas_hard = atlas.argmax().data if atlas is not None else None
    gt_hard = gt.astype(np.uint8) if gt is not None else None
    vol_t = torch.from_numpy(np.ascontiguousarray(image)).float()

    total_updates = 0 if cfg.mode == "none" else cfg.total_updates
    trace = TTATrace()
    best_d, best_iter, best_states = -np.inf, 0, None
    target_t: torch.Tensor | None = None
    best_probs: np.ndarray | None = None

    def refresh(iteration: int):
        nonlocal best_d, best_iter, best_states, target_t, best_probs
        probs = predict_volume(normalizer, segmenter, image, cfg.batch_size)
        dae_probs = denoise_volume(denoiser, probs)
        pred_hard = np.argmax(probs, axis=0).astype(np.uint8)
        d_dae = _mean_fg(pred_hard, np.argmax(dae_probs, axis=0).astype(np.uint8), num_labels)
        d_atlas = None
        if atlas_hard is not None:
            d_atlas = _mean_fg(pred_hard, atlas_hard, num_labels)
        d_gt = None
        if gt_hard is not None:
            d_gt = _mean_fg(pred_hard, gt_hard, num_labels)

        if cfg.mode == "oracle":
            source = TARGET_GT
            target = _one_hot_volume(gt_hard, num_labels)
        elif cfg.mode == "dae+atlas":
            source = switching_rule(d_dae, d_atlas, cfg.dae_over_atlas_min, cfg.atlas_dice_min)
            target = dae_probs if source == TARGET_DAE else atlas.data
        else:  # dae, adapt-all, none
            source = TARGET_DAE
            target = dae_probs
        trace.rows.append(TraceRow(iteration, source, d_dae, d_atlas, d_gt))
        # np.array copies: the atlas buffer is read-only and shared
        target_t = torch.from_numpy(np.array(target, dtype=np.float32))

        if d_dae > best_d:
            best_d, best_iter = d_dae, iteration
            best_states = (copy.deepcopy(normalizer.state_dict()),
                           copy.deepcopy(segmenter.state_dict()) if cfg.mode == "adapt-all" else None)
            best_probs = probs

    for t in range(total_updates):
        if t % cfg.refresh_every == 0:
            refresh(t)
        opt.zero_grad()
        loss = sweep_gradients(normalizer, segmenter, vol_t, target_t, cfg.batch_size, adapt_params)
        if not np.isfinite(loss):
            raise NumericalAbort(f"adaptation: non-finite loss {loss} at update {t}")
        if update_callback is not None:
            update_callback(t, target_t)
        opt.step()
    refresh(total_updates)

    trace.best_iteration = best_iter
    normalizer.load_state_dict(best_states[0])
    if cfg.mode == "adapt-all" and best_states[1] is not None:
        segmenter.load_state_dict(best_states[1])

    canonical = LabelMap(np.argmax(best_probs, axis=0).astype(np.uint8),
                         record.resampled_spacing_mm, num_labels)
    prediction = restore_to_original(canonical, record)
    return AdaptResult(prediction, trace, normalizer, segmenter, best_probs)


def _one_hot_volume(hard: np.ndarray, num_labels: int) -> np.ndarray:
    k = np.arange(num_labels)
    return (hard[None] == k[:, None, None, None]).astype(np.float32)


def _normalizer_from_state(state: dict) -> Normalizer:
    channels = state["convs.0.weight"].shape[0]
    kernel = state["convs.0.weight"].shape[-1]
    layers = len({k.split(".")[1] for k in state if k.startswith("convs.")})
    norm = Normalizer(channels, kernel, layers)
    norm.load_state_dict({k: v.clone() for k, v in state.items()})
    return norm


def adapt_fast(inputs, segmenter: UNet, normalizer_init: dict, denoiser: UNet,
               atlas: ProbMap | None, cfg: TTAConfig) -> list[AdaptResult]:
    """Adapt a sequence of subjects from one target domain with warm starts.

    The first subject runs the full budget from the source-domain parameters;
    later subjects start from the first subject's adapted parameters and run
    the reduced ``fast_total_updates`` budget. ``inputs`` is a sequence of
    ``(image, record, gt-or-None)`` triples.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("need at least one subject")
    results = []
    warm_state = None
    for i, (image, record, gt) in enumerate(inputs):
        if i == 0 or cfg.warm_start == "none":
            init, sub_cfg = normalizer_init, cfg
        else:
            init = warm_state
            sub_cfg = dataclasses.replace(cfg, total_updates=cfg.fast_total_updates)
        res = adapt(image, record, segmenter, init, denoiser, atlas, sub_cfg, gt=gt)
        if i == 0:
            warm_state = res.normalizer.state_dict()
        results.append(res)
    return results


def dae_postprocess(pred: ProbMap, denoiser: UNet, passes: int = 1) -> LabelMap:
    """Iterated denoise -> argmax -> one-hot, applied ``passes`` times."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    cur = pred.data
    hard = None
    for _ in range(passes):
        out = denoise_volume(denoiser, cur)
        hard = np.argmax(out, axis=0).astype(np.uint8)
        cur = _one_hot_volume(hard, pred.num_labels)
    return LabelMap(hard, pred.spacing_mm, pred.num_labels)
