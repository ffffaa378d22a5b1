"""Run configuration: one JSON document with a section per stage, strict keys, documented defaults."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .degrade import DegradationConfig
from .distill import DistillConfig
from .net import CONNECTOR_MODES, NetConfig
from .pipeline import TrainConfig
from .schedule import make_linear_schedule
from .seeding import derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class DataSection:
    n_train: int = 64
    n_heldout: int = 16
    height: int = 32
    width: int = 32
    frames_min: int = 5
    frames_max: int = 9
    misalign_rate: float = 0.3
    min_sharpness: float = 1e-3
    max_flicker: float = 0.05

    def __post_init__(self):
        if self.n_train < 1 or self.n_heldout < 0:
            raise ValueError("data.n_train must be >= 1 and data.n_heldout >= 0")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ValueError("need 1 <= data.frames_min <= data.frames_max")
        if self.height % 4 or self.width % 4:
            raise ValueError("data.height and data.width must be multiples of 4 (codec factor x patch)")
        if not 0 <= self.misalign_rate <= 1:
            raise ValueError("data.misalign_rate must lie in [0, 1]")


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-4
    pretrain_learning_rate: float = 1e-4
    steps: int = 2000
    pretrain_steps: int = 2000
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    projector_on: bool = True
    connector_mode: str = "dual"
    distill_on: bool = True

    def __post_init__(self):
        if self.connector_mode not in CONNECTOR_MODES:
            raise ValueError(f"train.connector_mode must be one of {CONNECTOR_MODES}")
        if self.steps < 1 or self.pretrain_steps < 1:
            raise ValueError("train.steps and train.pretrain_steps must be >= 1")
        if self.learning_rate <= 0 or self.pretrain_learning_rate <= 0:
            raise ValueError("learning rates must be > 0")

    def build(self, stage: str, seed: int) -> TrainConfig:
        pre = stage == "pretrain"
        return TrainConfig(
            stage=stage,
            learning_rate=self.pretrain_learning_rate if pre else self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay, adam_eps=self.adam_eps,
            steps=self.pretrain_steps if pre else self.steps,
            batch_size=self.batch_size,
            seed=derive_seed(seed, stage),
            projector_on=self.projector_on, connector_mode=self.connector_mode, distill_on=self.distill_on,
        )


@dataclass(frozen=True)
class RestoreSection:
    steps: int = 50
    tile: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("restore.steps must be >= 1")
        if self.tile is not None and self.tile < 1:
            raise ValueError("restore.tile must be >= 1")


@dataclass(frozen=True)
class DistillSection:
    t_star: int | None = None
    denoise_steps: int = 25
    blend_real: int = 5
    blend_distilled: int = 1

    def build(self, seed: int) -> DistillConfig:
        return DistillConfig(self.t_star, self.denoise_steps, self.blend_real, self.blend_distilled,
                             derive_seed(seed, "distill"))


@dataclass(frozen=True)
class DegradeSection:
    blur_sigma: tuple = (0.5, 1.5)
    scale: tuple = (2.0, 4.0)
    noise_sigma: tuple = (0.02, 0.06)
    levels: tuple | None = (16, 64)
    second_order: bool = False

    def build(self, seed: int) -> DegradationConfig:
        return DegradationConfig(tuple(self.blur_sigma), tuple(self.scale), tuple(self.noise_sigma),
                                 None if self.levels is None else tuple(self.levels), self.second_order,
                                 derive_seed(seed, "degrade"))


SECTIONS = {
    "schedule": ScheduleSection,
    "net": NetConfig,
    "degrade": DegradeSection,
    "data": DataSection,
    "distill": DistillSection,
    "train": TrainSection,
    "restore": RestoreSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    net: NetConfig = field(default_factory=NetConfig)
    degrade: DegradeSection = field(default_factory=DegradeSection)
    data: DataSection = field(default_factory=DataSection)
    distill: DistillSection = field(default_factory=DistillSection)
    train: TrainSection = field(default_factory=TrainSection)
    restore: RestoreSection = field(default_factory=RestoreSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, section: str, **kw) -> "RunConfig":
        try:
            new = replace(getattr(self, section), **kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}: {e}") from None
        return replace(self, **{section: new})

    def validate(self) -> None:
        try:
            self.schedule.build()
            self.degrade.build(self.seed)
            self.distill.build(self.seed).resolve_t_star(self.schedule.T)
        except ValueError as e:
            raise ConfigError(str(e)) from None


_TUPLE_FIELDS = {"blur_sigma", "scale", "noise_sigma", "levels"}


def _check_type(where: str, value, default) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = False
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, (list, tuple))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _section_from_dict(name: str, cls, d) -> object:
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]}")
    defaults = cls()
    kw = {}
    for k, v in d.items():
        _check_type(f"{name}.{k}", v, getattr(defaults, k))
        kw[k] = tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    kw = {}
    if "seed" in d:
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or not 0 <= d["seed"] < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        kw["seed"] = d["seed"]
    for name, cls in SECTIONS.items():
        if name in d:
            kw[name] = _section_from_dict(name, cls, d[name])
    cfg = RunConfig(**kw)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return config_from_dict(d)


ABLATION_KEYS = {"projector": "projector_on", "connector": "connector_mode", "distill": "distill_on"}


def parse_ablation(spec: str) -> dict:
    """``projector=off,connector=mlp_only,distill=off`` -> TrainSection overrides."""
    out = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if "=" not in item:
            raise ConfigError(f"ablation item {item!r} must be key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k in ABLATION_KEYS:
            k = ABLATION_KEYS[k]
        if k in ("projector_on", "distill_on"):
            if v.lower() not in ("on", "off", "true", "false", "1", "0"):
                raise ConfigError(f"ablation {k} expects on/off, got {v!r}")
            out[k] = v.lower() in ("on", "true", "1")
        elif k == "connector_mode":
            if v not in CONNECTOR_MODES:
                raise ConfigError(f"ablation connector must be one of {CONNECTOR_MODES}, got {v!r}")
            out[k] = v
        else:
            raise ConfigError(f"unknown ablation key {k!r}")
    return out
