"""Run configuration: ``[model]`` / ``[train]`` sections of ``key = value`` lines.

Example::

    [model]
    head = gsa_aspp
    dilations = 6,12,18

    [train]
    base_lr = 0.01   # comments run to end of line
"""
from __future__ import annotations

import dataclasses
from typing import Iterable

from .segnet import ModelConfig
from .tensor import ContractError
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _convert(raw: str, default, key: str, line):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if not items:
                raise ValueError
            kind = type(default[0]) if default else int
            vals = tuple(kind(p) for p in items)
            if key == "crop" and len(vals) == 1:
                vals = vals * 2
            return vals
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        what = type(default[0]).__name__ + " list" if isinstance(default, tuple) else type(default).__name__
        raise ConfigError(f"{key} expects {what}, got {raw!r}", line) from None


def parse_entries(text: str) -> dict[tuple[str, str], tuple[str, int]]:
    """Raw ``(section, key) -> (value, line)`` entries; checks syntax, sections, duplicates."""
    entries: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"malformed section header {body!r}", lineno)
            section = body[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        if section is None:
            raise ConfigError("key outside of a [model] or [train] section", lineno)
        key, value = (p.strip() for p in body.split("=", 1))
        if (section, key) in entries:
            raise ConfigError(f"duplicate key {key!r} (first set on line {entries[section, key][1]})", lineno)
        entries[section, key] = (value, lineno)
    return entries


def build(entries: dict[tuple[str, str], tuple[str, int | None]]) -> tuple[ModelConfig, TrainConfig]:
    kwargs: dict[str, dict] = {s: {} for s in SECTIONS}
    for (section, key), (value, line) in entries.items():
        defaults = _field_types(SECTIONS[section])
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in [{section}]", line)
        kwargs[section][key] = _convert(value, defaults[key], key, line)
    try:
        return ModelConfig(**kwargs["model"]), TrainConfig(**kwargs["train"])
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(text: str, overrides: Iterable[str] = ()) -> tuple[ModelConfig, TrainConfig]:
    """Parse config text, then apply ``section.key=value`` overrides."""
    entries = parse_entries(text)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = (p.strip() for p in lhs.split(".", 1))
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        entries[section, key] = (value.strip(), None)
    return build(entries)


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = []
    for name, obj in (("model", model), ("train", train)):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        lines.append("")
    return "\n".join(lines)
