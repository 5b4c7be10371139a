"""Volume containers, a bit-exact file format, and grid geometry ops.

Conventions used throughout:

* Arrays are indexed ``(D, H, W)`` (probability maps ``(K, D, H, W)``) with
  voxel ``i`` centered at physical position ``i * spacing`` along each axis,
  so voxel 0 sits at the origin.
* Resampling maps output voxel ``j`` to source coordinate
  ``j * target_spacing / source_spacing``; linear interpolation clamps at the
  volume edge, nearest-neighbor rounds half up.
* Crop / pad is centered with the floor-left convention: an odd difference
  puts the smaller share on the low-index side.

The on-disk format is a ``<stem>.volhdr.json`` / ``<stem>.volraw`` pair: a
JSON header and a raw little-endian C-order payload (``f32`` for images and
probability maps, ``u8`` for label maps). Round-tripping is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, GeometryError

PROB_SUM_TOL = 1e-5

HDR_SUFFIX = ".volhdr.json"
RAW_SUFFIX = ".volraw"


def _freeze(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, order="C")
    out.setflags(write=False)
    return out


def _check_spacing(spacing_mm) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing_mm must be 3 positive reals, got {spacing_mm}")
    return spacing


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with physical voxel spacing in millimeters."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume data contains non-finite values")
        object.__setattr__(self, "data", _freeze(data, np.float32))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A 3D integer segmentation over labels ``0 .. num_labels-1`` (0 = background)."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    num_labels: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"LabelMap data must be 3D, got shape {data.shape}")
        if self.num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {self.num_labels}")
        if data.size and (data.min() < 0 or data.max() >= self.num_labels):
            raise ValueError(
                f"label values must lie in [0, {self.num_labels - 1}], "
                f"got range [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", _freeze(data, np.uint8))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """Return a ``(K, D, H, W)`` one-hot array."""
        k = np.arange(self.num_labels, dtype=np.int64)
        return (self.data[None] == k[:, None, None, None]).astype(dtype)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """A per-voxel probability simplex over ``K`` classes, shape ``(K, D, H, W)``."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"ProbMap data must be 4D (K,D,H,W), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ProbMap data contains non-finite values")
        if data.size and (data.min() < -PROB_SUM_TOL or data.max() > 1 + PROB_SUM_TOL):
            raise ValueError("ProbMap values must lie in [0, 1]")
        sums = data.sum(axis=0, dtype=np.float64)
        if data.size and np.max(np.abs(sums - 1.0)) > PROB_SUM_TOL:
            raise ValueError(
                f"ProbMap per-voxel sums must equal 1 within {PROB_SUM_TOL}, "
                f"worst deviation {np.max(np.abs(sums - 1.0)):.3g}"
            )
        object.__setattr__(self, "data", _freeze(data, np.float32))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def num_labels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def argmax(self) -> LabelMap:
        return LabelMap(
            np.argmax(self.data, axis=0).astype(np.uint8),
            self.spacing_mm,
            self.num_labels,
        )


AnyVolume = Union[Volume, LabelMap, ProbMap]


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _split_path(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (HDR_SUFFIX, RAW_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def write_volume(path, v: AnyVolume) -> None:
    """Write ``v`` as a ``<stem>.volhdr.json`` + ``<stem>.volraw`` pair."""
    base = _split_path(path)
    if isinstance(v, Volume):
        kind, dtype, payload = "image", "f32", v.data.astype("<f4")
        spatial = v.data.shape
        num_labels = None
    elif isinstance(v, LabelMap):
        kind, dtype, payload = "label", "u8", v.data.astype("u1")
        spatial = v.data.shape
        num_labels = v.num_labels
    elif isinstance(v, ProbMap):
        kind, dtype, payload = "prob", "f32", v.data.astype("<f4")
        spatial = v.data.shape[1:]
        num_labels = v.num_labels
    else:
        raise TypeError(f"cannot write object of type {type(v).__name__}")

    header = {
        "shape": list(spatial),
        "spacing_mm": list(v.spacing_mm),
        "dtype": dtype,
        "order": "C",
        "byte_order": "LE",
        "kind": kind,
    }
    if num_labels is not None:
        header["num_labels"] = num_labels

    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_name(base.name + HDR_SUFFIX), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(base.with_name(base.name + RAW_SUFFIX), "wb") as f:
        f.write(payload.tobytes(order="C"))


def read_volume(path) -> AnyVolume:
    """Read a volume pair written by :func:`write_volume`."""
    base = _split_path(path)
    hdr_path = base.with_name(base.name + HDR_SUFFIX)
    raw_path = base.with_name(base.name + RAW_SUFFIX)
    with open(hdr_path) as f:
        header = json.load(f)

    kind = header.get("kind")
    dtype = header.get("dtype")
    if header.get("byte_order") != "LE" or header.get("order") != "C":
        raise FormatError(f"{hdr_path}: unsupported byte order / layout")
    if dtype not in ("f32", "u8"):
        raise FormatError(f"{hdr_path}: unknown dtype {dtype!r}")
    if kind not in ("image", "label", "prob"):
        raise FormatError(f"{hdr_path}: unknown kind {kind!r}")

    spatial = tuple(int(s) for s in header["shape"])
    spacing = tuple(header["spacing_mm"])
    np_dtype = np.dtype("<f4") if dtype == "f32" else np.dtype("u1")
    if kind == "prob":
        num_labels = int(header["num_labels"])
        full_shape = (num_labels,) + spatial
    else:
        full_shape = spatial
    expected = int(np.prod(full_shape)) * np_dtype.itemsize

    payload = raw_path.read_bytes()
    if len(payload) != expected:
        raise FormatError(
            f"{raw_path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=np_dtype).reshape(full_shape)

    if kind == "image":
        if dtype != "f32":
            raise FormatError(f"{hdr_path}: image payload must be f32")
        return Volume(data, spacing)
    if kind == "label":
        if dtype != "u8":
            raise FormatError(f"{hdr_path}: label payload must be u8")
        return LabelMap(data, spacing, int(header["num_labels"]))
    if dtype != "f32":
        raise FormatError(f"{hdr_path}: prob payload must be f32")
    return ProbMap(data, spacing)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResamplePart:
    """Geometry of one resampling step (forward direction)."""

    original_shape: tuple[int, int, int]
    original_spacing_mm: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    resampled_spacing_mm: tuple[float, float, float]


@dataclass(frozen=True)
class CropPadPart:
    """Per-axis (left, right) voxel counts removed by crop and added by pad."""

    crop_offsets: tuple[tuple[int, int], ...]
    pad_amounts: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class GridRecord:
    """Everything needed to map a canonical-grid result back to the original grid."""

    original_shape: tuple[int, int, int]
    original_spacing_mm: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    resampled_spacing_mm: tuple[float, float, float]
    crop_offsets: tuple[tuple[int, int], ...]
    pad_amounts: tuple[tuple[int, int], ...]

    @staticmethod
    def from_parts(rp: ResamplePart, cp: CropPadPart) -> "GridRecord":
        return GridRecord(
            original_shape=rp.original_shape,
            original_spacing_mm=rp.original_spacing_mm,
            resampled_shape=rp.resampled_shape,
            resampled_spacing_mm=rp.resampled_spacing_mm,
            crop_offsets=cp.crop_offsets,
            pad_amounts=cp.pad_amounts,
        )


def _target_shape(shape, spacing, target_spacing) -> tuple[int, ...]:
    # round(shape * spacing / target), half away from zero, at least 1 voxel
    return tuple(
        max(1, int(np.floor(n * s / t + 0.5)))
        for n, s, t in zip(shape, spacing, target_spacing)
    )


def _axis_coords(n_out: int, n_in: int, ratio: float) -> np.ndarray:
    coords = np.arange(n_out, dtype=np.float64) * ratio
    return np.clip(coords, 0.0, n_in - 1.0)


def _interp_linear_3d(data: np.ndarray, out_shape, ratios) -> np.ndarray:
    coords = [_axis_coords(out_shape[a], data.shape[a], ratios[a]) for a in range(3)]
    idx0 = [np.floor(c).astype(np.int64) for c in coords]
    idx1 = [np.minimum(i + 1, data.shape[a] - 1) for a, i in enumerate(idx0)]
    frac = [c - i for c, i in zip(coords, idx0)]

    d = data.astype(np.float64)
    # interpolate successively along W, H, D
    def gather(iz, iy, ix):
        return d[np.ix_(iz, iy, ix)]

    wz = frac[0][:, None, None]
    wy = frac[1][None, :, None]
    wx = frac[2][None, None, :]
    c00 = gather(idx0[0], idx0[1], idx0[2]) * (1 - wx) + gather(idx0[0], idx0[1], idx1[2]) * wx
    c01 = gather(idx0[0], idx1[1], idx0[2]) * (1 - wx) + gather(idx0[0], idx1[1], idx1[2]) * wx
    c10 = gather(idx1[0], idx0[1], idx0[2]) * (1 - wx) + gather(idx1[0], idx0[1], idx1[2]) * wx
    c11 = gather(idx1[0], idx1[1], idx0[2]) * (1 - wx) + gather(idx1[0], idx1[1], idx1[2]) * wx
    c0 = c00 * (1 - wy) + c01 * wy
    c1 = c10 * (1 - wy) + c11 * wy
    return c0 * (1 - wz) + c1 * wz


def _interp_nearest_3d(data: np.ndarray, out_shape, ratios) -> np.ndarray:
    idx = []
    for a in range(3):
        c = _axis_coords(out_shape[a], data.shape[a], ratios[a])
        idx.append(np.clip(np.floor(c + 0.5).astype(np.int64), 0, data.shape[a] - 1))
    return data[np.ix_(*idx)]


def _renormalize_prob(data: np.ndarray) -> np.ndarray:
    sums = data.sum(axis=0, keepdims=True)
    out = np.where(sums > 0, data / np.where(sums > 0, sums, 1.0), 0.0)
    empty = sums[0] <= 0
    if np.any(empty):
        out[0, empty] = 1.0
    return out


def resample(v: AnyVolume, target_spacing_mm, mode: str | None = None):
    """Resample to a new voxel spacing.

    Returns ``(resampled, ResamplePart)``. ``mode`` is ``"linear"`` or
    ``"nearest"``; label maps must use nearest (the default for them).
    Probability maps are interpolated per channel and renormalized.
    """
    target = _check_spacing(target_spacing_mm)
    if mode is None:
        mode = "nearest" if isinstance(v, LabelMap) else "linear"
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if isinstance(v, LabelMap) and mode != "nearest":
        raise ValueError("label maps must be resampled with nearest-neighbor mode")

    spacing = v.spacing_mm
    spatial = v.shape
    out_shape = _target_shape(spatial, spacing, target)
    ratios = tuple(t / s for t, s in zip(target, spacing))
    part = ResamplePart(spatial, spacing, out_shape, target)

    if isinstance(v, ProbMap):
        interp = _interp_linear_3d if mode == "linear" else _interp_nearest_3d
        chans = np.stack([interp(v.data[k], out_shape, ratios) for k in range(v.num_labels)])
        if mode == "linear":
            chans = _renormalize_prob(chans)
        return ProbMap(chans.astype(np.float32), target), part
    if isinstance(v, LabelMap):
        out = _interp_nearest_3d(v.data, out_shape, ratios)
        return LabelMap(out, target, v.num_labels), part
    if mode == "linear":
        out = _interp_linear_3d(v.data, out_shape, ratios).astype(np.float32)
    else:
        out = _interp_nearest_3d(v.data, out_shape, ratios)
    return Volume(out, target), part


# ---------------------------------------------------------------------------
# Crop / pad
# ---------------------------------------------------------------------------

def _crop_pad_axis(size: int, target: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if target <= 0:
        raise ValueError(f"target shape entries must be positive, got {target}")
    if size > target:
        left = (size - target) // 2
        return (left, size - target - left), (0, 0)
    if size < target:
        left = (target - size) // 2
        return (0, 0), (left, target - size - left)
    return (0, 0), (0, 0)


def _apply_crop_pad(arr: np.ndarray, crops, pads, fill) -> np.ndarray:
    slices = tuple(
        slice(c[0], arr.shape[a] - c[1]) for a, c in enumerate(crops)
    )
    out = arr[slices]
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, mode="constant", constant_values=fill)
    return out


def crop_or_pad(v: AnyVolume, target_shape, fill=0):
    """Center-crop and/or zero-pad the spatial grid to ``target_shape``.

    Returns ``(adjusted, CropPadPart)``. Probability maps pad missing regions
    with a background one-hot so per-voxel sums stay 1.
    """
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3:
        raise ValueError(f"target_shape must have 3 entries, got {target_shape}")
    spatial = v.shape
    crops, pads = zip(*(_crop_pad_axis(s, t) for s, t in zip(spatial, target)))
    part = CropPadPart(tuple(crops), tuple(pads))

    if isinstance(v, ProbMap):
        chans = [
            _apply_crop_pad(v.data[k], crops, pads, 1.0 if k == 0 else 0.0)
            for k in range(v.num_labels)
        ]
        return ProbMap(np.stack(chans), v.spacing_mm), part
    if isinstance(v, LabelMap):
        out = _apply_crop_pad(v.data, crops, pads, int(fill))
        return LabelMap(out, v.spacing_mm, v.num_labels), part
    out = _apply_crop_pad(v.data, crops, pads, float(fill))
    return Volume(out, v.spacing_mm), part


def restore_to_original(p: AnyVolume, rec: GridRecord) -> AnyVolume:
    """Invert the crop/pad then the resampling described by ``rec``.

    Crop regions removed on the way in are refilled with background (label 0,
    probability one-hot background, image 0). Label maps go back through
    nearest-neighbor, probability maps through per-channel linear
    interpolation followed by renormalization.
    """
    expected = tuple(
        rs - c[0] - c[1] + pd[0] + pd[1]
        for rs, c, pd in zip(rec.resampled_shape, rec.crop_offsets, rec.pad_amounts)
    )
    if p.shape != expected:
        raise GeometryError(
            f"record expects canonical shape {expected}, got {p.shape}"
        )

    # invert pad (remove added borders), then invert crop (re-add borders)
    inv_crops = rec.pad_amounts
    inv_pads = rec.crop_offsets
    ratios = tuple(
        o / r for o, r in zip(rec.original_spacing_mm, rec.resampled_spacing_mm)
    )

    if isinstance(p, ProbMap):
        chans = [
            _apply_crop_pad(p.data[k], inv_crops, inv_pads, 1.0 if k == 0 else 0.0)
            for k in range(p.num_labels)
        ]
        chans = [
            _interp_linear_3d(c, rec.original_shape, ratios) for c in chans
        ]
        data = _renormalize_prob(np.stack(chans))
        return ProbMap(data.astype(np.float32), rec.original_spacing_mm)
    if isinstance(p, LabelMap):
        out = _apply_crop_pad(p.data, inv_crops, inv_pads, 0)
        out = _interp_nearest_3d(out, rec.original_shape, ratios)
        return LabelMap(out, rec.original_spacing_mm, p.num_labels)
    out = _apply_crop_pad(p.data, inv_crops, inv_pads, 0.0)
    out = _interp_linear_3d(out, rec.original_shape, ratios).astype(np.float32)
    return Volume(out, rec.original_spacing_mm)
