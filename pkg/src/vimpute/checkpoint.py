"""JSON checkpoint container.

Tensors are stored as base64 of their little-endian float64 bytes, so a
save/load round trip is bit-exact and re-saving a loaded model reproduces the
file byte for byte.
"""
from __future__ import annotations

import base64
import dataclasses
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .model import ImputationModel, ModelConfig
from .training import TrainConfig
from .variational import Prior

FORMAT_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(data.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def to_payload(model: ImputationModel, train_cfg: Optional[TrainConfig] = None, seed: int = 0) -> dict:
    cfg = dataclasses.asdict(model.cfg)
    return {
        "format_version": FORMAT_VERSION,
        "variant": model.cfg.variant,
        "model_config": cfg,
        "train_config": None if train_cfg is None else dataclasses.asdict(train_cfg),
        "seed": seed,
        "tensors": {name: _encode(t.data) for name, t in model.named_tensors()},
    }


def save_checkpoint(model: ImputationModel, path, train_cfg: Optional[TrainConfig] = None, seed: int = 0) -> None:
    text = json.dumps(to_payload(model, train_cfg, seed), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def from_payload(payload: dict, variant: Optional[str] = None) -> ImputationModel:
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    if variant is not None and payload.get("variant") != variant:
        raise CheckpointError(f"checkpoint holds a {payload.get('variant')!r} model, not {variant!r}")
    try:
        cfg_dict = dict(payload["model_config"])
        cfg_dict["prior"] = Prior(**cfg_dict["prior"])
        cfg = ModelConfig(**cfg_dict)
        model = ImputationModel(cfg, seed=int(payload.get("seed", 0)))
        stored = payload["tensors"]
        expected = dict(model.named_tensors())
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
        for name, tensor in expected.items():
            arr = _decode(stored[name])
            if arr.shape != tensor.shape:
                raise CheckpointError(f"tensor {name}: stored shape {arr.shape} vs model {tensor.shape}")
            tensor.data[...] = arr
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return model


def load_checkpoint(path, variant: Optional[str] = None) -> ImputationModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is truncated or corrupt ({exc.msg})") from None
    return from_payload(payload, variant)


def train_config_of(path) -> Optional[TrainConfig]:
    payload = json.loads(Path(path).read_text())
    tc = payload.get("train_config")
    return None if tc is None else TrainConfig(**tc)
