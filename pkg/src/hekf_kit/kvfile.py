"""Flat ``name = value`` text files used for parameters, bounds and configs."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigurationError


def parse_kv(text: str, allowed: Iterable[str] | None = None) -> dict[str, str]:
    """Parse ``name = value`` lines. Blank lines and ``#`` comments are skipped.

    If ``allowed`` is given, unknown keys raise :class:`ConfigurationError`.
    """
    allowed_set = set(allowed) if allowed is not None else None
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'name = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        if allowed_set is not None and key not in allowed_set:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path, allowed: Iterable[str] | None = None) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), allowed)


def format_kv(values: Mapping[str, object], header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(float(value))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path, values: Mapping[str, object], header: str | None = None) -> None:
    Path(path).write_text(format_kv(values, header))


def to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: not a number: {value!r}") from None
