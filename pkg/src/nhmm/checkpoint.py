"""Self-describing JSON checkpoints: named tensors with shapes, model config and a checksum.

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces parameters bit for bit.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .model import NhmmModel

FORMAT = "nhmm-checkpoint"
VERSION = 1


def _checksum(payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


def to_payload(model: NhmmModel, training: Optional[dict] = None, extra: Optional[dict] = None) -> dict:
    tensors = {
        name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
        for name, arr in model.state_dict().items()
    }
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config(),
        "tensors": tensors,
        "training": training or {},
        "extra": extra or {},
    }
    payload["checksum"] = _checksum(payload)
    return payload


def from_payload(payload: dict) -> tuple[NhmmModel, dict]:
    if payload.get("format") != FORMAT:
        raise DataError("not an nhmm checkpoint")
    if payload.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    body = {k: v for k, v in payload.items() if k != "checksum"}
    if _checksum(body) != payload.get("checksum"):
        raise DataError("checkpoint checksum mismatch")
    model = NhmmModel.from_config(payload["model_config"])
    state = {
        name: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
        for name, t in payload["tensors"].items()
    }
    model.load_state_dict(state)
    return model, {"training": payload.get("training", {}), "extra": payload.get("extra", {})}


def save(model: NhmmModel, path, training: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_payload(model, training, extra)))
    return path


def load(path) -> tuple[NhmmModel, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from None
    return from_payload(payload)
