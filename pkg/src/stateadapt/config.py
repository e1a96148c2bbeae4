"""Flat ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are parsed against the
type of the dataclass field they target.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Tuple

from .errors import ConfigError


def parse_kv(text: str) -> Dict[str, Tuple[str, int]]:
    """Return ``{key: (raw value, line number)}``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}",
                              line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key", line=lineno)
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key, line=lineno)
        out[key] = (value, lineno)
    return out


def _convert(value: str, typ, key, lineno):
    try:
        if typ in (bool, "bool"):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        if typ in ("Optional[float]", "float | None"):
            return None if value.lower() in ("", "none") else float(value)
        if typ in ("Optional[int]", "int | None"):
            return None if value.lower() in ("", "none") else int(value)
        return value
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {key}",
                          key=key, line=lineno) from None


def build(cls, entries: Dict[str, Tuple[str, int]], required=(), allow_unknown=False):
    """Instantiate dataclass ``cls`` from parsed entries."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in required:
        if key not in entries:
            raise ConfigError(f"missing required key {key!r}", key=key)
    kwargs = {}
    for key, (value, lineno) in entries.items():
        if key not in fields:
            if allow_unknown:
                continue
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key=key, line=lineno)
        kwargs[key] = _convert(value, fields[key].type, key, lineno)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(obj) -> str:
    return "".join(f"{f.name}={getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))
