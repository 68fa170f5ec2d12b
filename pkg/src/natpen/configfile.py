"""Strict TOML loading shared by scenario and scan configs."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import ConfigError


def load_toml(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: no such file")
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def loads_toml(text: str) -> dict[str, Any]:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from None


def check_keys(table: dict[str, Any], allowed: Iterable[str], where: str, required: Iterable[str] = ()) -> None:
    """Fail closed on unknown keys; typos in ground truth should never pass silently."""
    allowed = set(allowed)
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(set(required) - set(table))
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {', '.join(missing)}")


def expect(value: Any, types: type | tuple[type, ...], where: str) -> Any:
    # bool is an int subclass; reject it where a number is wanted
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{where}: expected {types}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{where}: expected {getattr(types, '__name__', types)}, got {type(value).__name__}")
    return value
