"""Flat ``key=value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import InvalidArgumentError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    entries = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidArgumentError(f"{path}:{lineno}: empty key")
        entries[key] = value
    return entries


def write_config_file(path, values: dict) -> None:
    lines = [f"{k}={_format(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, kind, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise InvalidArgumentError(f"bad value for {name}: {raw!r}") from None
    return raw


def split_overrides(values: dict, *classes) -> list[dict]:
    """Route each key to the first dataclass declaring it; unknown keys are errors."""
    fields = [{f.name: f.type for f in dataclasses.fields(cls)} for cls in classes]
    routed = [{} for _ in classes]
    for key, raw in values.items():
        for target, known in zip(routed, fields):
            if key in known:
                target[key] = _coerce(key, known[key], raw)
                break
        else:
            raise InvalidArgumentError(f"unknown config key {key!r}")
    return routed


def build(cls, values: dict):
    (kwargs,) = split_overrides(values, cls)
    return cls(**kwargs)


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)
