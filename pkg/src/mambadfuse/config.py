"""Flat key=value run configuration covering architecture, training and paths.

One ``key = value`` per line, ``#`` starts a comment. ``preset`` (desk or full)
picks the base values for both the architecture and the trainer; every other
key overrides a single field. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ARCH_PRESETS, ArchConfig
from .train import PRESETS, TrainConfig

PATH_KEYS = ("data_a", "data_b", "out_ckpt", "out_report")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(**ARCH_PRESETS["desk"]))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**PRESETS["desk"]))
    paths: dict[str, str] = field(default_factory=lambda: {k: "" for k in PATH_KEYS})

    def items(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("preset", self.preset)]
        out += [(f.name, getattr(self.arch, f.name)) for f in dataclasses.fields(self.arch)]
        out += [(f.name, getattr(self.train, f.name)) for f in dataclasses.fields(self.train)]
        out += [(k, self.paths[k]) for k in PATH_KEYS]
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.items())

    def header(self) -> dict[str, str]:
        """Effective configuration as flat strings, for report/curve/checkpoint headers."""
        return {k: _fmt(v) for k, v in self.items()}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def build(values: dict[str, str]) -> RunConfig:
    values = dict(values)
    name = values.pop("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown value {name!r}; expected one of {sorted(PRESETS)}")
    arch_kw = dict(ARCH_PRESETS[name])
    train_kw = dict(PRESETS[name])
    arch_defaults = ArchConfig(**arch_kw)
    train_defaults = TrainConfig(**train_kw)
    arch_fields = {f.name for f in dataclasses.fields(ArchConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    paths = {k: "" for k in PATH_KEYS}
    unknown = sorted(k for k in values if k not in arch_fields | train_fields | set(PATH_KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    for key, raw in values.items():
        if key in arch_fields:
            arch_kw[key] = _coerce(key, raw, getattr(arch_defaults, key))
        elif key in train_fields:
            train_kw[key] = _coerce(key, raw, getattr(train_defaults, key))
        else:
            paths[key] = raw
    try:
        arch = ArchConfig(**arch_kw).validate()
        train = TrainConfig(**train_kw).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(name, arch, train, paths)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_pairs(text, str(path))
    values.update(overrides or {})
    return build(values)
