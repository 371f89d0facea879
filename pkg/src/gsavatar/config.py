"""Run configuration as an INI file: one section per stage, flat typed keys."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fit.register import RegisterConfig
from .fit.train import TrainConfig
from .objective import LossWeights
from .synthetic import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    register: RegisterConfig = field(default_factory=RegisterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def weights(self) -> LossWeights:
        return self.train.weights


SECTIONS = ("scene", "register", "train")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _flatten(obj) -> dict[str, str]:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name == "weights":
            continue
        if isinstance(v, dict):
            for k in sorted(v):
                out[f"{f.name}.{k}"] = _format(v[k])
        else:
            out[f.name] = _format(v)
    return out


def _parse(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(s.strip() for s in text.split(",") if s.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {text!r}") from None


def _set(obj, key: str, text: str, section: str) -> None:
    name, _, sub = key.partition(".")
    by_name = {f.name: f for f in fields(obj)}
    if name not in by_name or name == "weights":
        raise ConfigError(f"unknown key '{section}.{key}'")
    current = getattr(obj, name)
    if isinstance(current, dict):
        if not sub:
            raise ConfigError(f"'{section}.{key}' needs a sub-key, e.g. {key}.pose")
        current[sub] = _parse(float, text, f"{section}.{key}")
        return
    if sub:
        raise ConfigError(f"unknown key '{section}.{key}'")
    kind = type(current) if not isinstance(current, tuple) else tuple
    setattr(obj, name, _parse(kind, text, f"{section}.{key}"))


def _set_weight(weights: LossWeights, key: str, text: str) -> None:
    if key not in {f.name for f in fields(weights)}:
        raise ConfigError(f"unknown key 'weights.{key}'")
    setattr(weights, key, _parse(float, text, f"weights.{key}"))


def set_value(cfg: RunConfig, dotted: str, text: str) -> None:
    """Apply one 'section.key' override."""
    section, _, key = dotted.partition(".")
    if section == "weights":
        _set_weight(cfg.train.weights, key, text)
    elif section in SECTIONS and key:
        _set(getattr(cfg, section), key, text, section)
    else:
        raise ConfigError(f"unknown key '{dotted}'")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}".splitlines()[0]) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS + ("weights",):
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser.items(section):
            set_value(cfg, f"{section}.{key}", value)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text: every key, sorted within fixed sections."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser[section] = dict(sorted(_flatten(getattr(cfg, section)).items()))
    parser["weights"] = {f.name: _format(getattr(cfg.train.weights, f.name)) for f in fields(LossWeights)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
