"""Pipeline configuration: flat JSON with dotted ``section.key`` names.

Precedence, lowest first: dataclass defaults, the JSON file, environment
variables named ``RA_RRG_<SECTION>_<KEY>`` (e.g. ``RA_RRG_TRAIN_SEED=3``).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .errors import ValidationError
from .losses import LossConfig
from .trainer import SyntheticCorpusConfig, TrainConfig

ENV_PREFIX = "RA_RRG_"
REQUIRED_KEYS = ("train.seed",)


@dataclass(frozen=True)
class RetrievalSettings:
    threshold: float = 0.4


@dataclass(frozen=True)
class ClientSettings:
    backend: str = "mock"
    endpoint: str = ""
    model: str = "gpt-4o-2024-08-06"
    timeout: float = 60.0
    temperature: float = 0.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.backend not in ("mock", "remote"):
            raise ValidationError(f"client.backend must be 'mock' or 'remote', got {self.backend!r}")


@dataclass(frozen=True)
class TemplateSettings:
    dir: str = ""
    n_examples: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: SyntheticCorpusConfig = field(default_factory=SyntheticCorpusConfig)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    client: ClientSettings = field(default_factory=ClientSettings)
    templates: TemplateSettings = field(default_factory=TemplateSettings)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(PipelineConfig)}


def _section_fields(section: str) -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(SECTIONS[section])}


def _coerce(key: str, value, default):
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ValidationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{key}: expected {kind.__name__}, got {value!r}") from None


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def config_from_mapping(flat: dict, env: dict | None = None, require=REQUIRED_KEYS) -> PipelineConfig:
    """Build a PipelineConfig from dotted keys; unknown keys are rejected."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in _section_fields(section):
            raise ValidationError(f"unknown config key {key!r}")
        values[section][name] = value
    for var, raw in (env if env is not None else os.environ).items():
        if not var.startswith(ENV_PREFIX):
            continue
        section, _, name = var[len(ENV_PREFIX):].lower().partition("_")
        if section not in SECTIONS:
            continue
        by_lower = {f.lower(): f for f in _section_fields(section)}
        if name in by_lower:
            values[section][by_lower[name]] = _parse_env_value(raw)
    for key in require:
        section, _, name = key.partition(".")
        if name not in values[section]:
            raise ValidationError(f"missing required config key {key!r}")
    built = {}
    for section, factory in SECTIONS.items():
        defaults = factory()
        kwargs = {n: _coerce(f"{section}.{n}", v, getattr(defaults, n)) for n, v in values[section].items()}
        built[section] = dataclasses.replace(defaults, **kwargs)
    cfg = PipelineConfig(**built)
    if cfg.templates.dir and not Path(cfg.templates.dir).is_dir():
        raise ValidationError(f"templates.dir does not exist: {cfg.templates.dir}")
    return cfg


def load_config(path, env: dict | None = None) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            flat = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(flat, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return config_from_mapping(flat, env)


def config_to_mapping(cfg: PipelineConfig) -> dict:
    flat = {}
    for section in SECTIONS:
        for name, value in dataclasses.asdict(getattr(cfg, section)).items():
            flat[f"{section}.{name}"] = value
    return flat
