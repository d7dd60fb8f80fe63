"""Experiment configuration: an INI file with one section per component.

Values are parsed against the defaults of the matching dataclass; unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentError, ViewConfig
from .distill import ScheduleConfig, TemperatureConfig
from .model import EncoderConfig, ModelError, ProjectionHeadConfig
from .predict import ProbeError, ProbeTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = ""
    synthetic_n: int = 256
    synthetic_seed: int = 0
    synthetic_noise: float = 0.02
    split_seed: int = 0
    train_fraction: float = 0.7
    stratified: bool = False
    window: tuple = (-1000.0, 400.0)
    max_thickness_mm: float = 2.5


@dataclass
class EvalConfig:
    modes: tuple = ("knn", "trained")
    k: tuple = (50, 250)
    fractions: tuple = (0.01, 0.1, 1.0)
    seeds: tuple = (0,)
    weighted_knn: bool = True
    knn_source: str = "final_token"


@dataclass
class OutputConfig:
    root: str = ""
    seed: int = 0


SECTIONS = {
    "data": DataConfig,
    "views": ViewConfig,
    "encoder": EncoderConfig,
    "head": ProjectionHeadConfig,
    "schedule": ScheduleConfig,
    "temperature": TemperatureConfig,
    "probe": ProbeTrainConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: ProjectionHeadConfig = field(default_factory=ProjectionHeadConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    temperature: TemperatureConfig = field(default_factory=TemperatureConfig)
    probe: ProbeTrainConfig = field(default_factory=ProbeTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in SECTIONS:
            cp[name] = {k: format_value(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, tuple):
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            sample = default[0] if default else ""
            return tuple(parse_value(p, sample, where) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    defaults = dataclasses.asdict(cls())
    unknown = set(values) - set(defaults)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys {sorted(unknown)}; allowed: {sorted(defaults)}")
    kwargs = {k: parse_value(v, defaults[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, AugmentError, ModelError, ProbeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read an INI config (optional) and apply ``section.key=value`` overrides."""
    raw = {name: {} for name in SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; allowed: {sorted(SECTIONS)}")
            raw[section].update(cp[section])
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        raw[section][name] = value
    return ExperimentConfig(**{name: _build(name, values) for name, values in raw.items()})
