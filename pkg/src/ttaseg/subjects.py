"""Mapping dataset subjects onto the canonical processing grid and back.

Preprocessing order: per-volume 0-1 percentile normalization, resampling to
the target spacing (linear for images, nearest for labels), then centered
crop / pad to the canonical shape. The resulting grid record is kept so
predictions can be mapped back and evaluated at the original voxel size.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import percentile_normalize
from .errors import DependencyError
from .grids import GridRecord, LabelMap, Volume, crop_or_pad, read_volume, resample


@dataclass(frozen=True)
class PrepConfig:
    target_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    canonical_shape: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        if any(s <= 0 for s in self.target_spacing_mm) or any(n < 1 for n in self.canonical_shape):
            raise ValueError("target spacing and canonical shape must be positive")


@dataclass
class CanonicalSubject:
    subject_id: str
    domain: str
    split: str
    image: np.ndarray  # (D, H, W) float32 on the canonical grid
    label: np.ndarray  # (D, H, W) uint8 on the canonical grid
    record: GridRecord
    original_label: LabelMap  # ground truth on the original grid


def canonicalize_image(vol: Volume, prep: PrepConfig):
    normed = percentile_normalize(vol)
    resampled, rp = resample(normed, prep.target_spacing_mm, "linear")
    out, cp = crop_or_pad(resampled, prep.canonical_shape)
    return out, GridRecord.from_parts(rp, cp)


def canonicalize_label(lbl: LabelMap, prep: PrepConfig):
    resampled, rp = resample(lbl, prep.target_spacing_mm, "nearest")
    out, cp = crop_or_pad(resampled, prep.canonical_shape)
    return out, GridRecord.from_parts(rp, cp)


def load_subject(data_dir, entry: dict, prep: PrepConfig) -> CanonicalSubject:
    data_dir = Path(data_dir)
    img_path = data_dir / (entry["image"] + ".volhdr.json")
    lbl_path = data_dir / (entry["label"] + ".volhdr.json")
    for p in (img_path, lbl_path):
        if not p.exists():
            raise DependencyError(f"missing dataset file: {p}")
    img = read_volume(img_path)
    lbl = read_volume(lbl_path)
    img_c, record = canonicalize_image(img, prep)
    lbl_c, _ = canonicalize_label(lbl, prep)
    return CanonicalSubject(
        subject_id=entry["id"],
        domain=entry["domain"],
        split=entry["split"],
        image=np.array(img_c.data),
        label=np.array(lbl_c.data),
        record=record,
        original_label=lbl,
    )


def load_split(data_dir, manifest: dict, domain: str, split: str, prep: PrepConfig):
    from .synth import manifest_subjects

    return [
        load_subject(data_dir, entry, prep)
        for entry in manifest_subjects(manifest, domain=domain, split=split)
    ]
