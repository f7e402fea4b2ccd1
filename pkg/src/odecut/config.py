"""Namespaced configuration keys (``train.*``, ``model.*``, ``loss.*``,
``data.*``, ``solver.*``, ``bench.*``) read from an INI-style file and
overridden by command-line flags."""
from __future__ import annotations

import configparser
import dataclasses
import enum
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .losses import LossWeights
from .models import GeneratorConfig
from .odeint import SolverConfig
from .trainer import TrainConfig


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


class ConfigValueError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    image_size: int = 256
    runs: int = 5
    n_warm: int = 2


@dataclass(frozen=True)
class FixtureConfig:
    fixture_n: int = 16
    fixture_seed: int = 0
    # 0 means "same as data.image_size"
    fixture_size: int = 0


_TRAIN_DATA_FIELDS = ("image_size", "crop", "flip", "workers")

PRESETS: Dict[str, Dict[str, str]] = {
    "canonical": {},
    # desk-scale smoke run: 32x32, batch 4, 200 steps
    "smoke": {
        "data.image_size": "32",
        "train.epochs": "4",
        "train.steps_per_epoch": "50",
        "train.batch_size": "4",
        "train.disc_channels": "16",
        "model.base_channels": "16",
        "loss.n_patches": "64",
    },
}


@dataclass(frozen=True)
class Key:
    name: str
    section: str
    field: str
    type: Any
    default: Any


def _keys_for(section: str, cls, include: Optional[Tuple[str, ...]] = None,
              exclude: Tuple[str, ...] = ()) -> List[Key]:
    hints = typing.get_type_hints(cls)
    out = []
    for f in fields(cls):
        if include is not None and f.name not in include:
            continue
        if f.name in exclude or dataclasses.is_dataclass(hints[f.name]):
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out.append(Key(f"{section}.{f.name}", section, f.name, hints[f.name], default))
    return out


KEYS: Dict[str, Key] = {
    k.name: k
    for k in (
        _keys_for("train", TrainConfig, exclude=_TRAIN_DATA_FIELDS)
        + _keys_for("data", TrainConfig, include=_TRAIN_DATA_FIELDS)
        + _keys_for("data", FixtureConfig)
        + _keys_for("model", GeneratorConfig)
        + _keys_for("solver", SolverConfig)
        + _keys_for("loss", LossWeights)
        + _keys_for("bench", BenchConfig)
    )
}


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _parse(key: Key, text: str):
    t = key.type
    raw = text.strip()
    origin = typing.get_origin(t)
    args = typing.get_args(t)
    try:
        if origin is typing.Union and type(None) in args:
            if raw.lower() in ("none", ""):
                return None
            t = next(a for a in args if a is not type(None))
            origin, args = typing.get_origin(t), typing.get_args(t)
        if t is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if origin is tuple:
            item = args[0]
            return tuple(item(v) for v in raw.split(",") if v.strip())
        if isinstance(t, type) and issubclass(t, enum.Enum):
            return t(raw.lower())
        if t in (int, float, str):
            return t(raw)
    except (ValueError, StopIteration) as exc:
        raise ConfigValueError(f"{key.name}: cannot parse {text!r}") from exc
    raise ConfigValueError(f"{key.name}: unsupported type {t}")


def help_text() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["config keys (file section.key or --set key=value):"]
    for name, key in KEYS.items():
        lines.append(f"  {name:<{width}}  default: {_format(key.default)}")
    lines.append("presets: " + ", ".join(PRESETS))
    return "\n".join(lines)


def read_file(path) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        for k, v in parser.items(section):
            name = f"{section}.{k}"
            if name not in KEYS:
                raise ConfigKeyError(f"unknown config key {name!r} in {path}")
            out[name] = v
    return out


@dataclass
class Settings:
    values: Dict[str, Any]

    @classmethod
    def build(cls, *layers: Mapping[str, str]) -> "Settings":
        values = {name: key.default for name, key in KEYS.items()}
        for layer in layers:
            for name, text in layer.items():
                if name not in KEYS:
                    raise ConfigKeyError(f"unknown config key {name!r}")
                values[name] = text if not isinstance(text, str) else _parse(KEYS[name], text)
        return cls(values)

    def section(self, section: str) -> Dict[str, Any]:
        return {KEYS[n].field: v for n, v in self.values.items() if KEYS[n].section == section}

    def solver(self) -> SolverConfig:
        return SolverConfig(**self.section("solver"))

    def train_config(self) -> TrainConfig:
        try:
            gen = GeneratorConfig(solver=self.solver(), **self.section("model"))
            weights = LossWeights(**self.section("loss"))
            data = {k: v for k, v in self.section("data").items() if k in _TRAIN_DATA_FIELDS}
            return TrainConfig(generator=gen, weights=weights, **self.section("train"), **data)
        except ValueError as exc:
            raise ConfigValueError(str(exc)) from exc

    def fixtures(self) -> FixtureConfig:
        return FixtureConfig(**{k: v for k, v in self.section("data").items() if k not in _TRAIN_DATA_FIELDS})

    def bench(self) -> BenchConfig:
        return BenchConfig(**self.section("bench"))

    def echo(self) -> str:
        by_section: Dict[str, List[str]] = {}
        for name, v in self.values.items():
            key = KEYS[name]
            by_section.setdefault(key.section, []).append(f"{key.field} = {_format(v)}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in by_section.items())

    def write_echo(self, path) -> None:
        Path(path).write_text(self.echo())
