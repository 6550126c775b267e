"""Flat ``key=value`` config files mapped onto dataclasses."""
import dataclasses
from pathlib import Path

from .errors import ConfigurationError

_NONE = {"none", "null", "original", ""}


def parse_kv(text):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path):
    return parse_kv(Path(path).read_text())


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if value.lower() in _NONE:
        return None
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        proto = default[0] if default else None
        return tuple(_coerce(v, proto if proto is not None else 0.0) for v in items)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def coerce_fields(cls, raw, strict=True):
    """Convert string values to the types of ``cls``'s field defaults.

    Unknown keys raise ConfigurationError when ``strict``; otherwise they are dropped.
    """
    defaults = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            defaults[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            defaults[f.name] = f.default_factory()
        else:
            defaults[f.name] = None
    unknown = set(raw) - set(defaults)
    if unknown and strict:
        raise ConfigurationError(f"unknown config key(s) for {cls.__name__}: {sorted(unknown)}")
    try:
        return {k: _coerce(v, defaults[k]) for k, v in raw.items() if k in defaults}
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def to_kv(obj):
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join("none" if x is None else str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
