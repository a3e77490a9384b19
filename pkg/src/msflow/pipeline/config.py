"""Run configuration: a single JSON file with full defaulting, dotted-key
overrides, and a fingerprint tying outputs back to the exact settings."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from msflow.backbone import Encoder, ModelConfig, VelocityModel, build_tokenizer
from msflow.distill import DistillConfig
from msflow.sampler import SamplerConfig
from msflow.schedules import ScaleSchedule, make_scale_schedule
from msflow.train_stage1 import Stage1Config


@dataclass(frozen=True)
class ScheduleSettings:
    base_resolution: int = 16
    num_stages: int = 3
    steps_per_stage: tuple[int, ...] = (10, 10, 10)

    def build(self) -> ScaleSchedule:
        return make_scale_schedule(self.base_resolution, self.num_stages, self.steps_per_stage)


@dataclass(frozen=True)
class DataSettings:
    kind: str = "synthetic_textures"
    path: str | None = None
    resolution: int = 64
    num_train: int = 512
    num_val: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    distill: DistillConfig = field(default_factory=DistillConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(cfg_scale=2.0))
    data: DataSettings = field(default_factory=DataSettings)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        final = self.schedule.base_resolution * 2 ** (self.schedule.num_stages - 1)
        if final != self.data.resolution:
            raise ValueError(
                f"schedule tops out at {final}px but the data resolution is {self.data.resolution}px"
            )
        if self.data.kind == "image_folder":
            if self.data.path is None or not Path(self.data.path).exists():
                raise ValueError(f"image_folder dataset path does not exist: {self.data.path}")


_TUPLE_FIELDS = {
    ("schedule", "steps_per_stage"),
    ("distill", "t_teacher"),
    ("stage1", "val_at"),
}


def as_dict(config: RunConfig) -> dict:
    d = dataclasses.asdict(config)
    for section, key in _TUPLE_FIELDS:
        if d[section][key] is not None:
            d[section][key] = list(d[section][key])
    return d


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    sections = {
        "model": ModelConfig,
        "schedule": ScheduleSettings,
        "stage1": Stage1Config,
        "distill": DistillConfig,
        "sampler": SamplerConfig,
        "data": DataSettings,
    }
    kwargs = {}
    for name, cls in sections.items():
        sub = dict(d.pop(name, {}))
        for section, key in _TUPLE_FIELDS:
            if section == name and sub.get(key) is not None:
                sub[key] = tuple(sub[key])
        kwargs[name] = cls(**sub)
    allowed = {"out_dir", "seed"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**kwargs, **d)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings onto a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = d
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = _parse_value(raw)
    return d


def load_run_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    base = {} if path is None else json.loads(Path(path).read_text())
    apply_overrides(base, overrides)
    merged = as_dict(RunConfig())
    for section, value in base.items():
        if isinstance(value, dict) and section in merged:
            merged[section].update(value)
        else:
            merged[section] = value
    config = from_dict(merged)
    config.validate()
    return config


def fingerprint(config: RunConfig) -> str:
    canonical = json.dumps(as_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def write_resolved(config: RunConfig, out_dir: str | Path) -> Path:
    """Echo the fully resolved configuration next to the run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(as_dict(config), indent=2, sort_keys=True) + "\n")
    return path


def build_models(config: RunConfig) -> tuple[Encoder, VelocityModel]:
    return build_tokenizer(config.model, seed=config.seed)
