"""Run configuration: one dataclass block per pipeline stage plus global settings.

A config file is a JSON object with optional blocks ``synth``, ``ssm``, ``fit``,
``planner`` and ``metrics`` and the globals ``seed``, ``out`` and ``verbosity``.
Unknown keys are rejected.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fitting import FitConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_shapes: int = 30
    noise_amplitude: float = 0.3
    n_frames: int = 1
    peak_radial: float = 1.11
    peak_axial: float = 1.035
    peak_frame: int = 8
    n_candidates: int = 12
    stations: tuple = ()  # empty: all candidates
    noise_sigma: float = 0.5
    sigma_scale: float = 1.58  # when sampling from a model
    overrides: dict = field(default_factory=dict)  # ArchParams fields fixed for every draw

    def __post_init__(self):
        if self.n_shapes < 1 or self.n_frames < 1:
            raise ConfigError("synth.n_shapes and synth.n_frames must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be >= 0")


@dataclass(frozen=True)
class SSMConfig:
    n_modes: int = 10
    align: bool = False

    def __post_init__(self):
        if self.n_modes < 1:
            raise ConfigError("ssm.n_modes must be >= 1")


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 12
    max_slices: int = 12
    exhaustive: bool = False
    noise_sigma: float = 0.0
    max_fail_fraction: float = 0.25

    def __post_init__(self):
        if not 2 <= self.max_slices <= self.n_candidates:
            raise ConfigError("planner.max_slices must lie in [2, n_candidates]")
        if not 0 <= self.max_fail_fraction <= 1:
            raise ConfigError("planner.max_fail_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class MetricsConfig:
    spacing: float = 1.0
    surface_factor: int = 4
    up: tuple = (0.0, 0.0, 1.0)
    n_stations: int = 12

    def __post_init__(self):
        if self.spacing <= 0:
            raise ConfigError("metrics.spacing must be > 0")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = SynthConfig()
    ssm: SSMConfig = SSMConfig()
    fit: FitConfig = FitConfig()
    planner: PlannerConfig = PlannerConfig()
    metrics: MetricsConfig = MetricsConfig()
    seed: int = 0
    out: str = "out"
    verbosity: int = 0

    def snapshot(self) -> dict:
        return _plain(asdict(self))

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)


BLOCKS = {"synth": SynthConfig, "ssm": SSMConfig, "fit": FitConfig, "planner": PlannerConfig,
          "metrics": MetricsConfig}


def stage_seed(root: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the root seed and the stage name."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tuples(x):
    return tuple(_tuples(v) for v in x) if isinstance(x, (list, tuple)) else x


def _coerce(cls, name, block):
    if not isinstance(block, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(block) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    kw = {}
    for k, v in block.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = _tuples(v)
        kw[k] = v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {}
    for k, v in doc.items():
        kw[k] = _coerce(BLOCKS[k], k, v) if k in BLOCKS else v
    if not isinstance(kw.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    return RunConfig(**kw)


def load(path=None, env=os.environ) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = from_dict(doc)
    if "out" not in doc and env.get("ARCHFIT_OUT"):
        cfg = replace(cfg, out=env["ARCHFIT_OUT"])
    return cfg


def override(cfg: RunConfig, block: str, **kw) -> RunConfig:
    """Replace fields of one block, skipping None values (flags that were not given)."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    if block is None:
        return replace(cfg, **kw)
    current = asdict(getattr(cfg, block))
    current.update(kw)
    return replace(cfg, **{block: _coerce(BLOCKS[block], block, _plain(current))})
