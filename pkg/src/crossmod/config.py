"""Dataclass <-> plain dict conversion for run configs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from enum import Enum
from typing import Any, Mapping

from .data import PatchSpec, PhantomConfig
from .volume import ModalityPairSpec


class ConfigError(ValueError):
    """Raised with every problem found, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def to_dict(obj) -> Any:
    if isinstance(obj, ModalityPairSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k.value if isinstance(k, Enum) else k): to_dict(v) for k, v in obj.items()}
    return obj


_NESTED = {"pair_spec": ModalityPairSpec, "patch": PatchSpec}


def from_dict(cls, data: Mapping, where: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys.

    Problems are collected and raised together as a ConfigError.
    """
    prefix = f"{where}." if where else ""
    if not isinstance(data, Mapping):
        raise ConfigError([f"{where or cls.__name__}: expected a mapping"])
    names = {f.name for f in dataclasses.fields(cls)}
    problems = [f"{prefix}{k}: unknown key" for k in data if k not in names]
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            continue
        if key in _NESTED and isinstance(value, Mapping):
            try:
                value = from_dict(_NESTED[key], value, f"{prefix}{key}")
            except ConfigError as e:
                problems += e.problems
                continue
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if problems:
        raise ConfigError(problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError([f"{where or cls.__name__}: {e}"]) from None


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


__all__ = ["ConfigError", "to_dict", "from_dict", "config_hash", "PhantomConfig"]
