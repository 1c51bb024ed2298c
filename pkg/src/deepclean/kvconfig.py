"""Flat ``key=value`` config files mapped onto (nested) dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(value: str, kind):
    if kind is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind in (int, float, str):
        return kind(value)
    origin = typing.get_origin(kind)
    if origin is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _convert(value, args[0])
    return value


def apply_kv(obj, pairs: dict[str, str]):
    """Return a copy of dataclass ``obj`` with dotted keys applied.

    ``a.b=1`` sets field ``b`` of nested dataclass field ``a``; for dict fields
    the suffix is the dict key (``mix.flush=0.3``).
    """
    hints = typing.get_type_hints(type(obj))
    updates: dict = {}
    nested: dict[str, dict[str, str]] = {}
    for key, value in pairs.items():
        head, _, rest = key.partition(".")
        if head not in hints:
            raise ConfigError(f"unknown config key {key!r} for {type(obj).__name__}")
        if rest:
            nested.setdefault(head, {})[rest] = value
            continue
        try:
            updates[head] = _convert(value, hints[head])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    for head, sub in nested.items():
        current = getattr(obj, head)
        if dataclasses.is_dataclass(current):
            updates[head] = apply_kv(current, sub)
        elif isinstance(current, dict):
            merged = dict(current)
            merged.update({k: float(v) for k, v in sub.items()})
            updates[head] = merged
        else:
            raise ConfigError(f"{head} does not take sub-keys")
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def to_kv(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(to_kv(value, key + "."))
        elif isinstance(value, dict):
            out.update({f"{key}.{k}": repr(v) for k, v in value.items()})
        else:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


def config_hash(obj) -> str:
    text = json.dumps(to_kv(obj), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_kv(obj, path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in to_kv(obj).items()))
