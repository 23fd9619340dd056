"""Flat ``key = value`` configuration files covering training and masking settings.

Lines starting with ``#`` are comments. Keys are the field names of
:class:`TrainConfig` plus ``mask_mode``, ``mask_rate`` and ``mask_len``.
``none`` stands for an absent optional value (e.g. ``patience = none``).
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import DataError
from .preprocessing import MaskPlan
from .training import TrainConfig

MASK_KEYS = {"mask_mode": "mode", "mask_rate": "rate", "mask_len": "length"}


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError(f"{source}:{n}: empty key")
        if key in out:
            raise DataError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        hint = args[0]
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise DataError(f"config key {key!r}: cannot read {text!r} as {hint.__name__}") from None


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build(values: dict, base_train: TrainConfig = None, base_mask: MaskPlan = None) -> tuple:
    """Apply string ``values`` on top of the given (or default) configs."""
    train_hints = typing.get_type_hints(TrainConfig)
    mask_hints = typing.get_type_hints(MaskPlan)
    train_kw, mask_kw = {}, {}
    for key, text in values.items():
        if key in train_hints:
            train_kw[key] = _coerce(text, train_hints[key], key)
        elif key in MASK_KEYS:
            attr = MASK_KEYS[key]
            mask_kw[attr] = _coerce(text, mask_hints[attr], key)
        else:
            raise DataError(f"unknown config key {key!r}")
    train_cfg = dataclasses.replace(base_train or TrainConfig(), **train_kw)
    mask_plan = dataclasses.replace(base_mask or MaskPlan(), **mask_kw)
    if "seed" in train_kw:
        mask_plan = dataclasses.replace(mask_plan, seed=train_cfg.seed)
    return train_cfg, mask_plan


def serialize(train_cfg: TrainConfig, mask_plan: MaskPlan = None) -> str:
    lines = [f"{f.name} = {_fmt(getattr(train_cfg, f.name))}" for f in dataclasses.fields(train_cfg)]
    if mask_plan is not None:
        lines += [f"{key} = {_fmt(getattr(mask_plan, attr))}" for key, attr in MASK_KEYS.items()]
    return "\n".join(lines) + "\n"


def parse(text: str, source: str = "<config>") -> tuple:
    return build(parse_text(text, source))


def load(path) -> tuple:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    return build(parse_text(text, str(path)))
