"""Flat ``key = value`` config files with one section per module.

Precedence when resolving a run: command-line flags > config file > defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .model import ModelConfig
from .trainer import TrainSchedule

# model fields that always come from the data file
DATA_BOUND = ("n_nodes", "channels", "interval_seconds")


@dataclass
class DataSettings:
    split: tuple = (0.6, 0.2, 0.2)
    geo_sigma: float | None = None
    geo_eps: float = 0.1


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)


def _model_defaults():
    return {f.name: f.default for f in dataclasses.fields(ModelConfig)
            if f.name not in DATA_BOUND and f.default is not dataclasses.MISSING}


def _train_defaults():
    return {f.name: f.default for f in dataclasses.fields(TrainSchedule)}


def _data_defaults():
    return {f.name: f.default for f in dataclasses.fields(DataSettings)}


SECTIONS = {"model": _model_defaults, "train": _train_defaults, "data": _data_defaults}


def _coerce(default, raw, key):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if default is None:
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _render(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)


def default_config_text():
    out = io.StringIO()
    for section, defaults in SECTIONS.items():
        out.write(f"[{section}]\n")
        for key, value in defaults().items():
            out.write(f"{key} = {_render(value)}\n")
        out.write("\n")
    return out.getvalue()


def parse_config(text) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        defaults = SECTIONS[section]()
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            target[key] = _coerce(defaults[key], raw, key)
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def apply_overrides(cfg: RunConfig, pairs):
    """Apply ``section.key=value`` strings on top of ``cfg``."""
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        defaults = SECTIONS[section]()
        if key not in defaults:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        getattr(cfg, section)[key] = _coerce(defaults[key], raw, key)
    return cfg


def resolve(cfg: RunConfig, *, n_nodes, channels, interval_seconds):
    model = ModelConfig(n_nodes=n_nodes, channels=channels, interval_seconds=interval_seconds,
                        **cfg.model)
    sched = TrainSchedule(**cfg.train)
    data = DataSettings(**cfg.data)
    return model, sched, data
