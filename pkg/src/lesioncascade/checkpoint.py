"""Single-file checkpoints with embedded model config."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .clsmodel import ClsModel, ClsModelConfig, build_cls_model
from .segmodel import SegModel, SegModelConfig, build_seg_model


def digest(obj) -> str:
    """Content hash of a JSON-serializable object (key order independent)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_kind(model) -> str:
    if isinstance(model, SegModel):
        return "seg"
    if isinstance(model, ClsModel):
        return "cls"
    raise TypeError(f"unsupported model type {type(model).__name__}")


def save_checkpoint(path, model, policy: dict | None = None, config_digest: str = "",
                    train_state: dict | None = None, state_dict: dict | None = None) -> None:
    payload = {
        "kind": model_kind(model),
        "model_config": model.config.to_dict(),
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "policy": policy,
        "config_digest": config_digest,
    }
    if isinstance(model, ClsModel):
        payload["class_names"] = list(model.config.class_names)
    if train_state is not None:
        payload["train_state"] = train_state
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload["kind"] == "seg":
        model = build_seg_model(SegModelConfig.from_dict(payload["model_config"]))
    elif payload["kind"] == "cls":
        model = build_cls_model(ClsModelConfig.from_dict(payload["model_config"]))
    else:
        raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")
    model = model.to(getattr(torch, payload.get("dtype", "float32")))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
