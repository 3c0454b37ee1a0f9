"""Experiment configuration, read from YAML.

See ``docs/config.md`` for the schema.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Optional

import yaml

from .backbone import BackboneSpec
from .model import ModelConfig
from .records import TrainConfig


@dataclass
class ClipConfig:
    backend: str = "fixture"  # "fixture" | "real"
    fixtures: Optional[str] = None
    fixture_mode: str = "strict"  # "strict" | "hash"
    name: str = "openai/clip-vit-base-patch16"
    dim: int = 512


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    input_size: tuple[int, int] = (224, 224)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    isfc_heads: int = 4
    fusion_heads: int = 1
    head_hidden: int = 32
    coarse_stride: int = 16
    train_manifest: Optional[str] = None
    eval_manifests: dict[str, str] = field(default_factory=dict)
    n_eval: int = 5
    output_dir: str = "runs/default"
    checkpoint_every: int = 0  # 0: final checkpoint only
    base_dir: Optional[str] = None  # relative paths resolve against this

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        path = Path(p).expanduser()
        if not path.is_absolute() and self.base_dir:
            path = Path(self.base_dir) / path
        return path

    def model_config(self, clip_dim: Optional[int] = None) -> ModelConfig:
        t = self.train
        return ModelConfig(
            input_size=tuple(self.input_size), backbone=self.backbone,
            clip_dim=clip_dim or self.clip.dim, num_prompts=len(t.prompt_vocabulary), k=t.k,
            isfc_heads=self.isfc_heads, fusion_heads=self.fusion_heads, head_hidden=self.head_hidden,
            coarse_stride=self.coarse_stride, isfc=t.isfc, clip_interaction=t.clip_interaction,
            clip_regularization=t.clip_regularization,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["backbone"]["tap_points"] = list(self.backbone.tap_points)
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[str] = None) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "train" in d:
            d["train"] = _build(TrainConfig, d["train"])
        if "clip" in d:
            d["clip"] = _build(ClipConfig, d["clip"])
        if "backbone" in d:
            bb = dict(d["backbone"])
            for key in ("tap_points", "channels"):
                if key in bb:
                    bb[key] = tuple(bb[key])
            d["backbone"] = _build(BackboneSpec, bb)
        if "input_size" in d:
            size = d["input_size"]
            d["input_size"] = (size, size) if isinstance(size, int) else tuple(size)
        if d.get("base_dir") is None:
            d["base_dir"] = base_dir
        return cls(**d)

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw, base_dir=str(path.parent.resolve()))

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)
        return path


def _build(cls, d):
    if isinstance(d, cls):
        return d
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)
