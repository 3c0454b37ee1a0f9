"""Checkpoint container.

A checkpoint is one ``torch.save`` archive holding a plain dict::

    format        "lcco-checkpoint/1"
    step          training step at save time
    shapes        {tensor name: [dim, ...]}   header, checked on load
    tensors       {tensor name: Tensor}       network weights (CLIP excluded)
    model_config  ModelConfig as a dict
    experiment    ExperimentConfig as a dict (config snapshot)

Only tensors and builtin containers are stored, so it loads with
``torch.load(weights_only=True)``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import torch

from .config import ExperimentConfig
from .model import CoSegNet, ModelConfig
from .records import DataError

CHECKPOINT_FORMAT = "lcco-checkpoint/1"


def save_checkpoint(net: CoSegNet, path: Path, experiment: Optional[ExperimentConfig] = None,
                    step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "tensors": tensors,
        "model_config": net.cfg.to_dict(),
        "experiment": experiment.to_dict() if experiment is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path: Path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not an lcco checkpoint")
    for name, t in payload["tensors"].items():
        if list(t.shape) != payload["shapes"].get(name):
            raise DataError(f"{path}: tensor {name} shape {list(t.shape)} disagrees with header")
    return payload


def load_checkpoint(path: Path) -> tuple[CoSegNet, Optional[ExperimentConfig], dict]:
    """Rebuild the network from a checkpoint. Returns ``(net, experiment_config, payload)``."""
    payload = read_checkpoint(path)
    mc = dict(payload["model_config"])
    # weights come from the archive; skip any pretrained download
    mc["backbone"] = dict(mc["backbone"], pretrained=False)
    net = CoSegNet(ModelConfig(**mc))
    net.load_state_dict(payload["tensors"])
    exp = payload.get("experiment")
    exp_cfg = ExperimentConfig.from_dict(exp) if exp else None
    return net, exp_cfg, payload
