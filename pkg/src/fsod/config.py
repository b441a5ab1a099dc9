"""Dataclass <-> JSON helpers that reject unknown keys."""
from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigError


def _dataclass_type(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, recursing into nested dataclasses."""
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = _dataclass_type(hints.get(key))
        if sub is not None and isinstance(value, dict):
            factory = fields[key].default_factory
            if factory is not dataclasses.MISSING:
                # partial sections fill from the field's own default, not the class defaults
                default = factory()
                if isinstance(default, sub):
                    value = merge(to_dict(default), value)
            value = from_dict(sub, value, f"{path}.{key}" if path else key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def to_dict(obj):
    """JSON-ready dict; integer dict keys become strings."""
    def fix(v):
        if isinstance(v, dict):
            return {str(k): fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        return v
    return fix(dataclasses.asdict(obj))


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out
