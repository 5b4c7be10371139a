"""Experiment configuration: one JSON document, strictly validated.

A config file (or bundled profile) is a nested JSON object mirroring the
dataclasses below. Unknown or missing keys raise :class:`ConfigError` with
the dotted key path. All randomness is derived from the single root ``seed``
via named derivation, so a config plus seed pins the whole pipeline.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .networks import NetworkConfig
from .subjects import PrepConfig
from .synth import AnatomySpec, DomainSpec, StructureSpec
from .training import NoiseConfig, TrainConfig
from .tta import MODES, TTAConfig


@dataclass(frozen=True)
class DatasetConfig:
    anatomy: AnatomySpec
    domains: tuple[DomainSpec, ...]
    source_domain: str
    counts: dict

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if self.source_domain not in names:
            raise ValueError(f"source_domain {self.source_domain!r} not among domains {names}")


@dataclass(frozen=True)
class TTARunConfig:
    """One method row of the final report: a mode applied to some domains."""

    method: str
    mode: str  # dae | dae+atlas | adapt-all | oracle | none | postproc:<k>
    domains: tuple[str, ...]
    fast: bool = False

    def __post_init__(self):
        if self.mode.startswith("postproc:"):
            try:
                passes = int(self.mode.split(":", 1)[1])
            except ValueError:
                passes = 0
            if passes < 1:
                raise ValueError(f"bad post-processing mode {self.mode!r}")
        elif self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.domains:
            raise ValueError(f"run {self.method!r} lists no domains")


@dataclass(frozen=True)
class EvalConfig:
    n_permutations: int = 10_000
    # (method_a, method_b) pairs compared per shared domain in the report
    comparisons: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    prep: PrepConfig
    dataset: DatasetConfig
    augment: AugmentConfig
    dae_augment: AugmentConfig
    networks: NetworkConfig
    train_seg: TrainConfig
    train_dae: TrainConfig
    noise: NoiseConfig
    tta: TTAConfig
    runs: tuple[TTARunConfig, ...]
    eval: EvalConfig


# ---------------------------------------------------------------------------
# Strict dict -> dataclass conversion
# ---------------------------------------------------------------------------

def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, path)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", ())):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported config field type {tp!r}")


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], f"{path}.{name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}.{name}: missing required key")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data, "config")


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def builtin_profile_dict(name: str, _seen=()) -> dict:
    if name in _seen:
        raise ConfigError(f"config.profile: circular 'extends' chain at {name!r}")
    ref = resources.files("ttaseg").joinpath(f"profiles/{name}.json")
    if not ref.is_file():
        raise ConfigError(f"config.profile: no bundled profile named {name!r}")
    raw = json.loads(ref.read_text())
    base_name = raw.pop("extends", None)
    if base_name is not None:
        raw = _deep_merge(builtin_profile_dict(base_name, _seen + (name,)), raw)
    return raw


def load_config(profile: str = "desk", config_path=None, seed: int | None = None):
    """Resolve the effective config: bundled profile, user overlay, seed override.

    Returns ``(ExperimentConfig, raw_dict)``; the raw dict is what gets hashed
    for stage caching.
    """
    raw = builtin_profile_dict(profile)
    if config_path is not None:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            overlay = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        raw = _deep_merge(raw, overlay)
    if seed is not None:
        raw["seed"] = int(seed)
    return config_from_dict(raw), raw


def section_hash(raw: dict, sections) -> str:
    """Content hash over named top-level sections plus the root seed."""
    picked = {"seed": raw.get("seed")}
    for s in sections:
        picked[s] = raw.get(s)
    blob = json.dumps(picked, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
