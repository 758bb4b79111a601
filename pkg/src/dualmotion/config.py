"""Experiment configuration: one YAML (or JSON) document, strict keys, presets for defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .evalkit import EvalProtocol
from .trainer import PretrainConfig, TrainConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    frames: int = 8
    resolution: int = 32
    # explicit scene specs; each entry may also carry "source_id" and "prompt"
    clips: list = field(default_factory=list)
    motion: str | None = None
    n_videos: int = 1
    appearance_pool: list = field(default_factory=lambda: [["red", "square"]])
    with_motion_prompt: bool = False
    speed: float = 2.0
    size: float = 0.25


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class CustomizeConfig(TrainConfig):
    beta: float = 1.0
    steps: int | None = None
    mode: str = "dual"


@dataclass
class SampleConfig:
    prompt: str = "a blue circle"
    seeds: list | None = None
    num_samples: int = 4
    steps: int = 30
    guidance_scale: float = 12.0
    gamma_spatial: float = 1.0
    gamma_temporal: float = 1.0
    spatial_source: str | None = None
    image_train_steps: int | None = None


@dataclass
class PathsConfig:
    base: str | None = None
    run: str | None = None
    spatial_run: str | None = None
    temporal_run: str | None = None
    coupled_run: str | None = None
    image: str | None = None


@dataclass
class ProbeConfig:
    t_grid: list = field(default_factory=lambda: [0, 100, 300, 600])
    beta: float = 1.0
    anchor: int | None = None


SECTIONS = {
    "data": DataConfig,
    "model": UNetConfig,
    "schedule": ScheduleConfig,
    "pretrain": PretrainConfig,
    "customize": CustomizeConfig,
    "sample": SampleConfig,
    "paths": PathsConfig,
    "probe": ProbeConfig,
    "eval": EvalProtocol,
}
TOP_LEVEL = {"preset", "seed", *SECTIONS}

PRESETS: dict[str, dict] = {
    "desk": {},
    "paper-scale": {
        "data": {"frames": 16, "resolution": 384},
        "model": {"num_frames": 16, "image_size": 384},
        "pretrain": {"frames": 16, "resolution": 384},
        "customize": {"frames_per_clip": 16},
    },
}


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    customize: CustomizeConfig = field(default_factory=CustomizeConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{where}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            if isinstance(v, list) and "tuple" in str(f.type):
                v = tuple(v)
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


def from_dict(raw: dict, preset: str | None = None, seed: int | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown config key '{key}'")
    preset = preset or raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], {k: v for k, v in raw.items() if k in SECTIONS})
    seed = int(raw.get("seed", 0) if seed is None else seed)
    sections = {name: _build(cls, merged.get(name, {}), name) for name, cls in SECTIONS.items()}
    for name in ("pretrain", "customize"):
        if "seed" not in merged.get(name, {}):
            sections[name].seed = seed
    return ExperimentConfig(preset=preset, seed=seed, **sections)


def load_config(path: str | Path | None, preset: str | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        return from_dict({}, preset, seed)
    text = Path(path).read_text(encoding="utf-8")
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if isinstance(raw, dict) and "command" in raw and "config" in raw:
        raw = raw["config"]  # a run manifest
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(raw or {}, preset, seed)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def override(obj, **values: Any):
    """Set non-None values on a config section in place."""
    for k, v in values.items():
        if v is not None:
            setattr(obj, k, v)
    return obj
