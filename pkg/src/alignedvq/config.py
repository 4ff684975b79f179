"""Flat key=value run configuration.

A config file holds one `key=value` pair per line (UTF-8, `#` comments).
Keys mirror the model/data/train/quantizer/link dataclass fields plus the
transport endpoint; unknown keys are rejected. Command-line flags override
file values, and every run logs the fully resolved mapping.
"""

from __future__ import annotations

import sys
from dataclasses import fields
from pathlib import Path

from .data import DataConfig
from .encoder import ModelConfig
from .runtime import LinkModel
from .train import TrainConfig
from .vq import VQConfig
from .wire import SizeModel


class RunConfigError(ValueError):
    pass


def known_keys() -> set[str]:
    keys = {"host", "port", "block", "location", "count", "out", "csv"}
    for cls in (ModelConfig, DataConfig, TrainConfig, VQConfig, LinkModel, SizeModel):
        keys.update(f.name for f in fields(cls))
    return keys


_KNOWN = known_keys()


def load_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN:
            raise RunConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(value: str, template):
    if template is None or isinstance(template, str):
        return value
    if isinstance(template, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, frozenset):
        return frozenset(part.strip() for part in value.split(",") if part.strip())
    return type(template)(value)


def resolve(defaults: dict, file_values: dict[str, str], flag_values: dict) -> dict:
    """defaults < config file < explicit flags; logs the resolved mapping."""
    resolved = dict(defaults)
    for key, value in file_values.items():
        if key in resolved:
            try:
                resolved[key] = _coerce(value, defaults[key])
            except ValueError as exc:
                raise RunConfigError(f"bad value for {key!r}: {value!r}") from exc
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    line = " ".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    print(f"config: {line}", file=sys.stderr)
    return resolved
