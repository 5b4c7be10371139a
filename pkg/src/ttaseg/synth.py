"""Synthetic labeled anatomies rendered under multiple intensity domains.

Anatomies are unions of jittered ellipsoids around fixed per-structure home
positions, so a voxel-wise average of one-hot labels is a meaningful shape
prior without any registration step. A domain assigns per-class intensity
statistics, a gamma exponent, a smooth multiplicative bias field, additive
noise and optionally a contrast inversion; rendering one label map under
different domains simulates scanner / protocol shifts while the underlying
geometry stays fixed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import GenerationError
from .grids import LabelMap, Volume, write_volume
from .seeds import derive_seed

_MAX_PLACEMENT_RETRIES = 25


@dataclass(frozen=True)
class StructureSpec:
    """Geometry of one foreground structure (labels are painted in order)."""

    center_frac: tuple[float, float, float]  # home position, fraction of volume shape
    num_ellipsoids: tuple[int, int] = (1, 1)  # inclusive count range
    radius_range: tuple[float, float] = (4.0, 6.0)  # semi-axis range, voxels
    jitter_vox: float = 1.5  # max per-axis center offset, voxels


@dataclass(frozen=True)
class AnatomySpec:
    num_labels: int
    volume_shape: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    structures: tuple[StructureSpec, ...]
    seed: int = 0

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if len(self.structures) != self.num_labels - 1:
            raise ValueError(
                f"expected {self.num_labels - 1} structure specs, got {len(self.structures)}"
            )


@dataclass(frozen=True)
class DomainSpec:
    """Generative description of one synthetic scanner / protocol."""

    name: str
    class_means: tuple[float, ...]  # per label, in [0, 1]
    class_stds: tuple[float, ...]  # per label, >= 0
    gamma: float = 1.0
    bias_amplitude: float = 0.0
    bias_scale_vox: float = 8.0  # smoothness scale of the bias field, voxels
    noise_std: float = 0.0
    invert_contrast: bool = False

    def __post_init__(self):
        if any(not (0.0 <= m <= 1.0) for m in self.class_means):
            raise ValueError(f"{self.name}: class means must lie in [0, 1]")
        if any(s < 0 for s in self.class_stds):
            raise ValueError(f"{self.name}: class stds must be >= 0")
        if self.gamma <= 0:
            raise ValueError(f"{self.name}: gamma must be > 0")
        if self.bias_amplitude < 0 or self.bias_scale_vox <= 0 or self.noise_std < 0:
            raise ValueError(f"{self.name}: bias / noise parameters out of range")


def _paint_ellipsoid(data: np.ndarray, center, radii, label: int) -> None:
    grids = np.ogrid[tuple(slice(0, n) for n in data.shape)]
    m = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)) <= 1.0
    data[m] = label


def generate_anatomy(spec: AnatomySpec) -> LabelMap:
    """Deterministically generate a label map from ``spec``.

    Structures are unions of ellipsoids; later labels overwrite earlier ones.
    Raises :class:`GenerationError` if radii cannot fit or if, after a bounded
    number of retries, some label ends up with no voxels.
    """
    shape = spec.volume_shape
    for s in spec.structures:
        if 2 * s.radius_range[1] >= min(shape):
            raise GenerationError(
                f"structure radius {s.radius_range[1]} does not fit in volume {shape}"
            )
        if s.radius_range[0] <= 0 or s.radius_range[0] > s.radius_range[1]:
            raise GenerationError(f"invalid radius range {s.radius_range}")

    rng = np.random.default_rng(spec.seed)
    for _ in range(_MAX_PLACEMENT_RETRIES):
        data = np.zeros(shape, dtype=np.uint8)
        for label, s in enumerate(spec.structures, start=1):
            home = np.array([f * n for f, n in zip(s.center_frac, shape)])
            count = int(rng.integers(s.num_ellipsoids[0], s.num_ellipsoids[1] + 1))
            for _ in range(count):
                center = home + rng.uniform(-s.jitter_vox, s.jitter_vox, size=3)
                radii = rng.uniform(s.radius_range[0], s.radius_range[1], size=3)
                center = np.clip(center, radii, np.array(shape) - 1 - radii)
                _paint_ellipsoid(data, center, radii, label)
        present = set(np.unique(data).tolist())
        if all(k in present for k in range(1, spec.num_labels)):
            return LabelMap(data, spec.spacing_mm, spec.num_labels)
    raise GenerationError(
        f"could not place all {spec.num_labels - 1} structures after "
        f"{_MAX_PLACEMENT_RETRIES} attempts"
    )


def _bias_field(rng: np.random.Generator, shape, scale_vox: float) -> np.ndarray:
    """Smooth field in [-1, 1]: low-resolution noise, smoothed, upsampled."""
    coarse_shape = tuple(max(2, int(np.ceil(n / scale_vox))) for n in shape)
    coarse = rng.uniform(-1.0, 1.0, size=coarse_shape)
    coarse = gaussian_filter(coarse, sigma=1.0, mode="nearest")
    # linear upsample spanning the full coarse grid
    out = coarse
    for axis in range(3):
        coords = np.linspace(0.0, coarse_shape[axis] - 1.0, shape[axis])
        i0 = np.floor(coords).astype(np.int64)
        i1 = np.minimum(i0 + 1, coarse_shape[axis] - 1)
        t = coords - i0
        sl0 = np.take(out, i0, axis=axis)
        sl1 = np.take(out, i1, axis=axis)
        w_shape = [1, 1, 1]
        w_shape[axis] = shape[axis]
        t = t.reshape(w_shape)
        out = sl0 * (1 - t) + sl1 * t
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def render_domain(lbl: LabelMap, d: DomainSpec, seed: int) -> Volume:
    """Render ``lbl`` as an intensity image under domain ``d``.

    Voxel value: ``clip01(((mu_k + sigma_k * n) * bias)^gamma + noise)`` with
    ``n`` standard normal per voxel and ``bias`` a smooth multiplicative field
    of the configured amplitude; contrast inversion maps ``x -> 1 - x`` last.
    Deterministic given ``seed``.
    """
    if len(d.class_means) != lbl.num_labels or len(d.class_stds) != lbl.num_labels:
        raise ValueError(
            f"domain {d.name!r} defines {len(d.class_means)} class means, "
            f"label map has {lbl.num_labels} labels"
        )
    rng = np.random.default_rng(seed)
    means = np.asarray(d.class_means, dtype=np.float64)
    stds = np.asarray(d.class_stds, dtype=np.float64)
    idx = lbl.data.astype(np.int64)

    base = means[idx] + stds[idx] * rng.standard_normal(lbl.shape)
    bias = 1.0 + d.bias_amplitude * _bias_field(rng, lbl.shape, d.bias_scale_vox)
    img = np.clip(base * bias, 0.0, None) ** d.gamma
    img = img + d.noise_std * rng.standard_normal(lbl.shape)
    if d.invert_contrast:
        img = 1.0 - img
    return Volume(np.clip(img, 0.0, 1.0).astype(np.float32), lbl.spacing_mm)


def build_dataset(
    anatomy: AnatomySpec,
    domains,
    counts: dict,
    out_dir,
    root_seed: int = 0,
    overwrite: bool = False,
) -> dict:
    """Generate per-subject image + label pairs for every domain and split.

    ``counts`` maps split name -> subjects per domain. Each subject belongs to
    exactly one domain; subject seeds are derived from ``root_seed`` and the
    (domain, split, index) triple, so splits never share seeds. Writes volumes
    plus ``dataset_manifest.json`` under ``out_dir`` and returns the manifest.
    """
    domains = list(domains)
    if not domains:
        raise ValueError("need at least one domain")
    if len({d.name for d in domains}) != len(domains):
        raise ValueError("domain names must be unique")
    if not counts or any(int(c) < 1 for c in counts.values()):
        raise ValueError(f"split counts must all be >= 1, got {counts}")
    for d in domains:
        if len(d.class_means) != anatomy.num_labels:
            raise ValueError(
                f"domain {d.name!r} has {len(d.class_means)} class means, "
                f"anatomy has {anatomy.num_labels} labels"
            )

    out_dir = Path(out_dir)
    manifest_path = out_dir / "dataset_manifest.json"
    if manifest_path.exists() and not overwrite:
        raise FileExistsError(
            f"{manifest_path} exists; pass overwrite=True to regenerate"
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    subjects = []
    for dom in domains:
        for split in sorted(counts):
            for i in range(int(counts[split])):
                sid = f"{dom.name}_{split}_{i:03d}"
                anat_seed = derive_seed(root_seed, "anatomy", dom.name, split, i)
                render_seed = derive_seed(root_seed, "render", dom.name, split, i)
                lbl = generate_anatomy(dataclasses.replace(anatomy, seed=anat_seed))
                img = render_domain(lbl, dom, render_seed)
                img_name = f"{sid}_img"
                lbl_name = f"{sid}_lbl"
                write_volume(out_dir / img_name, img)
                write_volume(out_dir / lbl_name, lbl)
                subjects.append(
                    {
                        "id": sid,
                        "domain": dom.name,
                        "split": split,
                        "image": img_name,
                        "label": lbl_name,
                    }
                )

    manifest = {"subjects": subjects}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "dataset_manifest.json") as f:
        return json.load(f)


def manifest_subjects(manifest: dict, domain: str | None = None, split: str | None = None):
    """Subjects filtered by domain / split, in manifest (id) order."""
    subs = manifest["subjects"]
    if domain is not None:
        subs = [s for s in subs if s["domain"] == domain]
    if split is not None:
        subs = [s for s in subs if s["split"] == split]
    return subs
