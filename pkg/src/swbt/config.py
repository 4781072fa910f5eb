"""Experiment configuration: an INI file with one section per stage.

Example::

    [experiment]
    env_preset = pickplace-2d
    seed = 0
    out = runs/demo

    [data]
    expert_episodes = 50
    imperfect_levels = level-0.9
    imperfect_episodes = 150

    [model]
    precision = f32

    [pretrain]
    steps = 2000

    [similarity]
    beta = 0.9

    [finetune]
    steps = 2000
    lam = 0.1

Unknown keys are errors; missing keys take the dataclass defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field, fields

from . import envsim
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig
from .scoring import SimilarityConfig
from .transformer import ModelConfig

ENV_PRESETS = {"pickplace-2d": {"horizon": envsim.HORIZON}}


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    expert_episodes: int = 50
    imperfect_levels: tuple = ("level-0.9",)
    imperfect_episodes: int = 150  # per level

    def __post_init__(self):
        if isinstance(self.imperfect_levels, str):
            self.imperfect_levels = tuple(s.strip() for s in self.imperfect_levels.split(",") if s.strip())
        self.imperfect_levels = tuple(self.imperfect_levels)
        for lv in self.imperfect_levels:
            if lv not in envsim.PRESETS:
                raise ConfigError(f"unknown policy level {lv!r}; known: {sorted(envsim.PRESETS)}")
        if self.expert_episodes < 1 or self.imperfect_episodes < 0:
            raise ConfigError("episode counts must be positive")


@dataclass
class ExperimentConfig:
    env_preset: str = "pickplace-2d"
    seed: int = 0
    out: str = "runs"
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.env_preset not in ENV_PRESETS:
            raise ConfigError(f"unknown env preset {self.env_preset!r}; known: {sorted(ENV_PRESETS)}")
        # one model config drives both pretraining and random-init fine-tuning
        self.pretrain = dataclasses.replace(self.pretrain, model=self.model)
        self.finetune = dataclasses.replace(self.finetune, model=self.model)
        if self.similarity.beta != self.finetune.beta:
            raise ConfigError(f"[similarity] beta {self.similarity.beta} and [finetune] beta "
                              f"{self.finetune.beta} must agree")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace_nested(self, {"experiment": {"seed": seed}})


SECTIONS = {
    "data": DataSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "similarity": SimilarityConfig,
    "finetune": FinetuneConfig,
}


def _coerce(raw: str, default, name: str):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


def _section_kwargs(cls, items: dict, section: str) -> dict:
    defaults = cls()
    known = {f.name: getattr(defaults, f.name) for f in fields(cls) if f.name != "model"}
    out = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        out[key] = _coerce(raw, known[key], f"[{section}] {key}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    extra = set(cp.sections()) - set(SECTIONS) - {"experiment"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    kw = {}
    if cp.has_section("experiment"):
        top = {"env_preset": "pickplace-2d", "seed": 0, "out": "runs"}
        for key, raw in cp.items("experiment"):
            if key not in top:
                raise ConfigError(f"unknown key [experiment] {key}")
            kw[key] = _coerce(raw, top[key], f"[experiment] {key}")
    try:
        for name, cls in SECTIONS.items():
            items = dict(cp.items(name)) if cp.has_section(name) else {}
            kw[name] = cls(**_section_kwargs(cls, items, name))
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["experiment"] = {"env_preset": cfg.env_preset, "seed": str(cfg.seed), "out": cfg.out}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        sec = {}
        for f in fields(obj):
            if f.name == "model" and name != "model":
                continue
            v = getattr(obj, f.name)
            sec[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        cp[name] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def replace_nested(cfg: ExperimentConfig, changes: dict) -> ExperimentConfig:
    """Copy with ``{section: {key: value}}`` overrides; ``experiment`` is top level."""
    kw = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section, vals in changes.items():
        if section == "experiment":
            kw.update(vals)
        elif section in SECTIONS:
            kw[section] = dataclasses.replace(kw[section], **vals)
        else:
            raise ConfigError(f"unknown config section {section!r}")
    return ExperimentConfig(**kw)
