"""The co-segmentation network: backbone plus the three coarse-to-fine refinement stages."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
from torch import nn

from .backbone import BackboneSpec, MaskHead, build_backbone
from .clip_provider import similarity
from .interaction import ClipInteraction
from .isfc import ImageSetCorrespondence
from .records import ClipBundle, DataError
from .regularization import ClipRegularization


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    clip_dim: int = 512
    num_prompts: int = 20
    k: int = 5
    isfc_heads: int = 4
    fusion_heads: int = 1
    head_hidden: int = 32
    coarse_stride: int = 16
    isfc: bool = True
    clip_interaction: bool = True
    clip_regularization: bool = True

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if isinstance(self.backbone, dict):
            bb = dict(self.backbone)
            for key in ("tap_points", "channels"):
                if key in bb:
                    bb[key] = tuple(bb[key])
            self.backbone = BackboneSpec(**bb)
        if not 1 <= self.k <= self.num_prompts:
            raise ValueError(f"k={self.k} outside [1, {self.num_prompts}]")

    @property
    def coarse_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return max(1, h // self.coarse_stride), max(1, w // self.coarse_stride)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["backbone"]["tap_points"] = list(self.backbone.tap_points)
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d


@dataclass
class ForwardOutput:
    pred: torch.Tensor  # (N, 1, H, W) soft masks
    coarse: Optional[torch.Tensor] = None  # (N, 1, h, w)
    upsilon: Optional[torch.Tensor] = None  # (P,)
    i_star: Optional[int] = None
    topk: Optional[torch.Tensor] = None
    f3_before: Optional[torch.Tensor] = None
    f3_after: Optional[torch.Tensor] = None


class CoSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.backbone.channels
        self.backbone = build_backbone(cfg.backbone, cfg.input_size)
        self.isfc = ImageSetCorrespondence(c1, heads=cfg.isfc_heads)
        self.interaction = ClipInteraction(cfg.clip_dim, c2, cfg.coarse_size, heads=cfg.fusion_heads)
        self.regularization = ClipRegularization(cfg.num_prompts, cfg.clip_dim, c3)
        self.head = MaskHead(c3, hidden=cfg.head_hidden)

    def set_toggles(self, isfc: Optional[bool] = None, clip_interaction: Optional[bool] = None,
                    clip_regularization: Optional[bool] = None) -> "CoSegNet":
        if isfc is not None:
            self.cfg.isfc = isfc
        if clip_interaction is not None:
            self.cfg.clip_interaction = clip_interaction
        if clip_regularization is not None:
            self.cfg.clip_regularization = clip_regularization
        return self

    def forward(self, images: torch.Tensor, h_img: Optional[torch.Tensor] = None,
                h_txt: Optional[torch.Tensor] = None, bundle: Optional[ClipBundle] = None) -> ForwardOutput:
        cfg = self.cfg
        n = images.shape[0]
        if n < 1:
            raise DataError("empty image set")
        needs_clip = cfg.clip_interaction or cfg.clip_regularization
        if needs_clip and bundle is None:
            if h_img is None or h_txt is None:
                raise ValueError("CLIP embeddings are required when a CLIP module is enabled")
            bundle = similarity(h_img.to(images.dtype), h_txt.to(images.dtype))

        # each image goes through the backbone on its own, so the baseline has
        # no cross-image coupling at all
        pyramids = [self.backbone.extract_pyramid(images[i:i + 1]) for i in range(n)]
        out = ForwardOutput(pred=images.new_empty(0))

        if cfg.isfc and n >= 2:
            f1 = torch.cat([p.f1 for p in pyramids])
            refined = self.isfc.refine_set(f1)
            pyramids = [self.backbone.reinject(p, refined[i:i + 1], 1) for i, p in enumerate(pyramids)]

        if cfg.clip_interaction:
            f2 = torch.cat([p.f2 for p in pyramids])
            refined, h_hat, distilled = self.interaction(f2, bundle, cfg.k)
            pyramids = [self.backbone.reinject(p, refined[i:i + 1], 2) for i, p in enumerate(pyramids)]
            out.coarse = self.interaction.coarse_decode(h_hat)
            out.topk = distilled.indices

        f3 = torch.cat([p.f3 for p in pyramids])
        out.f3_before = f3
        if cfg.clip_regularization:
            f3, out.upsilon, out.i_star = self.regularization(f3, bundle.s, bundle.h_txt)
        out.f3_after = f3

        out.pred = torch.cat([self.head(f3[i:i + 1], cfg.input_size) for i in range(n)])
        return out
