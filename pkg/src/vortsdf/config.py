"""Flat ``key = value`` configuration files for :class:`TrainConfig`.

Blank lines and ``#`` comments are ignored. Every TrainConfig field is a
valid key; booleans accept true/false/yes/no/1/0, tuples are comma
separated.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(name, default, text, where):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text.replace("_", ""))
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for '{name}': {exc}") from exc


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> TrainConfig:
    defaults = TrainConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ConfigError(f"{where}: unknown key '{key}'")
        values[key] = _coerce(key, getattr(defaults, key), val, where)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: not found")
    return parse_config(p.read_text(), str(p), overrides)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
