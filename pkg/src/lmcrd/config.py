"""Flat ``key = value`` configuration with dotted keys over nested dataclasses."""

from __future__ import annotations

import dataclasses
import difflib
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


def flat_keys(obj, prefix: str = "") -> list[str]:
    keys = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            keys += flat_keys(value, f"{prefix}{f.name}.")
        else:
            keys.append(prefix + f.name)
    return keys


def suggest(word: str, options: Iterable[str]) -> str:
    match = difflib.get_close_matches(word, list(options), n=1, cutoff=0.5)
    return f" (did you mean {match[0]!r}?)" if match else ""


def parse_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(raw: str, current: Any, key: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (list, tuple)):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = type(current[0]) if current else str
            return [_coerce(s, elem(), key) if elem is not str else s for s in items]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def apply_overrides(root, overrides: dict[str, str], namespaces: dict[str, Any] | None = None) -> None:
    """Set dotted keys in place.

    ``namespaces`` maps extra prefixes (e.g. ``"synth"``) to additional
    dataclass instances that share the key space.
    """
    namespaces = namespaces or {}
    known = flat_keys(root) + [f"{p}.{k}" for p, obj in namespaces.items() for k in flat_keys(obj)]
    for key, raw in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}{suggest(key, known)}")
        parts = key.split(".")
        target = root
        if parts[0] in namespaces:
            target, parts = namespaces[parts[0]], parts[1:]
        for name in parts[:-1]:
            target = getattr(target, name)
        setattr(target, parts[-1], _coerce(raw, getattr(target, parts[-1]), key))
