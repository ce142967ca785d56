"""Plain-text key=value project configuration with [section] headers.

Sections: [dsp], [model], [train], [paths]. Unknown sections or keys are
rejected; relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .dsp import DspConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ProjectConfig:
    dsp: DspConfig
    model: ModelConfig
    train: TrainConfig
    paths: dict


def _field_kind(f) -> type:
    text = str(f.type)
    if "bool" in text:
        return bool
    if "tuple" in text:
        return tuple
    if "float" in text:
        return float
    if "int" in text:
        return int
    return str


def _coerce(raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if kind is tuple:
        out = []
        for part in (p.strip() for p in raw.split(",") if p.strip()):
            if "x" in part:
                out.append(tuple(int(q) for q in part.split("x")))
            else:
                out.append(float(part) if any(c in part for c in ".eE") else int(part))
        return tuple(out)
    return kind(raw)


def _apply_section(cls, section: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{name}]")
        try:
            kwargs[key] = _coerce(raw, _field_kind(known[key]))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {name}.{key}: {raw!r} ({exc})") from exc
    return cls(**kwargs)


_SECTIONS = ("dsp", "model", "train", "paths")


def load_config(path) -> ProjectConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read config file: {path}")
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")

    def items(section):
        return dict(parser.items(section)) if parser.has_section(section) else {}

    base = os.path.dirname(os.path.abspath(path))
    paths = {key: raw if os.path.isabs(raw) else os.path.join(base, raw)
             for key, raw in items("paths").items()}
    return ProjectConfig(
        dsp=_apply_section(DspConfig, items("dsp"), "dsp"),
        model=_apply_section(ModelConfig, items("model"), "model"),
        train=_apply_section(TrainConfig, items("train"), "train"),
        paths=paths,
    )


def default_config() -> ProjectConfig:
    return ProjectConfig(dsp=DspConfig(), model=ModelConfig(),
                         train=TrainConfig(), paths={})
