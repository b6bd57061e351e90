"""Strict construction of config dataclasses from parsed JSON.

Unknown keys and values of the wrong JSON type are rejected instead of
silently defaulted.  Field annotations are read as strings (every config
module uses postponed evaluation), e.g. ``"float"``, ``"int | None"`` or
``"list[int] | None"``.
"""

from __future__ import annotations

import dataclasses
from typing import Any

from .errors import ConfigError


def _accepts(annotation: str, value: Any) -> bool:
    for option in (part.strip() for part in annotation.split("|")):
        if option == "None" and value is None:
            return True
        if option == "bool" and isinstance(value, bool):
            return True
        if isinstance(value, bool):
            continue  # JSON true/false never stands in for a number
        if option == "int" and isinstance(value, int):
            return True
        if option == "float" and isinstance(value, (int, float)):
            return True
        if option == "str" and isinstance(value, str):
            return True
        if option.startswith("list[") and isinstance(value, list):
            inner = option[len("list[") : -1]
            if all(_accepts(inner, v) for v in value):
                return True
    return False


def from_strict_dict(cls, data: Any, label: str):
    """Build ``cls(**data)`` after checking keys and value types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{label} config must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {label} config keys: {unknown}")
    for key, value in data.items():
        annotation = fields[key].type
        if not _accepts(str(annotation), value):
            raise ConfigError(f"{label} config key {key!r}: expected {annotation}, got {value!r}")
    return cls(**data)
