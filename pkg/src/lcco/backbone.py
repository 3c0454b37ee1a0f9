"""Segmentation backbones exposing a three-level coarse-to-fine top-down path.

A backbone splits into two halves:

* ``encode`` runs the bottom-up trunk once per image and returns one lateral
  feature per level (already projected to that level's channel width);
* ``top_down`` rebuilds the finer levels from a (possibly refined) coarser one.

``reinject`` uses the cached laterals so that replacing level ``k`` recomputes
levels ``k+1..3`` exactly as the backbone would.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import check_finite, zero_
from .records import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    identity: str = "stub"  # "stub" | "pretrained_resnet50"
    tap_points: tuple[str, str, str] = ("s8", "s4", "s2")
    channels: tuple[int, int, int] = (32, 32, 32)
    frozen: bool = False
    pretrained: bool = True  # resnet50 only; False gives random init
    seed: int = 0

    def __post_init__(self):
        if len(self.tap_points) != 3 or len(self.channels) != 3:
            raise ValueError("a backbone has exactly three tap points, coarse to fine")
        if self.identity not in ("stub", "pretrained_resnet50"):
            raise ValueError(f"unknown backbone {self.identity!r}")


@dataclass(frozen=True)
class FeaturePyramid:
    """Features for a batch of images: ``f1`` coarsest, ``f3`` finest.

    ``laterals`` are the backbone's per-level lateral inputs, kept so finer
    levels can be recomputed after a coarser one is replaced.
    """

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    laterals: tuple[torch.Tensor, torch.Tensor, torch.Tensor]

    def level(self, k: int) -> torch.Tensor:
        return (self.f1, self.f2, self.f3)[k - 1]

    def validate(self) -> "FeaturePyramid":
        sizes = [f.shape[-2:] for f in (self.f1, self.f2, self.f3)]
        for a, b in zip(sizes, sizes[1:]):
            if a[0] > b[0] or a[1] > b[1]:
                raise ValueError(f"pyramid spatial sizes must be non-decreasing, got {sizes}")
        for k, f in enumerate((self.f1, self.f2, self.f3), 1):
            check_finite(f, f"pyramid level {k}")
        return self


class Backbone(nn.Module):
    spec: BackboneSpec

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c1, c2, c3 = spec.channels
        # merge_k projects the upsampled level-k map to level k+1's width
        self.merge2 = nn.Conv2d(c1, c2, 1, bias=False)
        self.merge3 = nn.Conv2d(c2, c3, 1, bias=False)
        self.input_size: Optional[tuple[int, int]] = None

    @property
    def channels(self) -> tuple[int, int, int]:
        return self.spec.channels

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def top_down(self, level: int, feat: torch.Tensor, laterals) -> tuple[torch.Tensor, ...]:
        """Return levels ``level..3`` starting from ``feat`` at ``level``."""
        out = [feat]
        merges = (self.merge2, self.merge3)
        for k in range(level, 3):
            lat = laterals[k]
            up = F.interpolate(out[-1], size=lat.shape[-2:], mode="bilinear", align_corners=False)
            out.append(lat + merges[k - 1](up))
        return tuple(out)

    def extract_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        single = images.ndim == 3
        if single:
            images = images[None]
        if self.input_size is not None and tuple(images.shape[-2:]) != tuple(self.input_size):
            raise DataError(f"resolution mismatch: got {tuple(images.shape[-2:])}, "
                            f"backbone configured for {tuple(self.input_size)}")
        laterals = self.encode(images)
        f1, f2, f3 = self.top_down(1, laterals[0], laterals)
        return FeaturePyramid(f1, f2, f3, laterals)

    def reinject(self, pyramid: FeaturePyramid, refined: torch.Tensor, level: int) -> FeaturePyramid:
        if level not in (1, 2, 3):
            raise ValueError(f"level must be 1, 2 or 3, got {level}")
        current = pyramid.level(level)
        if refined.shape != current.shape:
            raise ValueError(f"shape mismatch at level {level}: {tuple(refined.shape)} vs {tuple(current.shape)}")
        levels = list((pyramid.f1, pyramid.f2, pyramid.f3))
        levels[level - 1:] = self.top_down(level, refined, pyramid.laterals)
        return replace(pyramid, f1=levels[0], f2=levels[1], f3=levels[2])


class StubBackbone(Backbone):
    """Linear, bias-free stand-in: a strided patch filter per level plus the top-down merge.

    Weights come from a fixed seed, so the stub is deterministic and needs no
    download. Being linear, it maps an all-zero image to an all-zero pyramid.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        self.strides = tuple(int(t.lstrip("s")) for t in spec.tap_points)
        if not (self.strides[0] >= self.strides[1] >= self.strides[2]):
            raise ValueError(f"stub strides must be coarse to fine, got {self.strides}")
        self.laterals = nn.ModuleList(
            nn.Conv2d(3, c, kernel_size=s, stride=s, bias=False)
            for s, c in zip(self.strides, spec.channels)
        )
        gen = torch.Generator().manual_seed(spec.seed)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) / fan_in ** 0.5)

    def encode(self, images):
        return tuple(conv(images) for conv in self.laterals)


class ResNet50Backbone(Backbone):
    """ResNet-50 trunk with an FPN-style top-down path.

    With the default taps (``layer4``, ``layer3``, ``layer2``) a 224x224 input
    gives 7x7, 14x14 and 28x28 levels.
    """

    STAGE_WIDTHS = {"layer1": 256, "layer2": 512, "layer3": 1024, "layer4": 2048}

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        from torchvision.models import resnet50, ResNet50_Weights

        weights = ResNet50_Weights.IMAGENET1K_V2 if spec.pretrained else None
        trunk = resnet50(weights=weights)
        self.stem = nn.Sequential(trunk.conv1, trunk.bn1, trunk.relu, trunk.maxpool)
        self.stages = nn.ModuleDict(
            {name: getattr(trunk, name) for name in ("layer1", "layer2", "layer3", "layer4")}
        )
        for t in spec.tap_points:
            if t not in self.STAGE_WIDTHS:
                raise ValueError(f"unknown resnet50 tap point {t!r}")
        self.lateral_convs = nn.ModuleList(
            nn.Conv2d(self.STAGE_WIDTHS[t], c, 1) for t, c in zip(spec.tap_points, spec.channels)
        )
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def encode(self, images):
        x = self.stem((images - self.mean) / self.std)
        taps = {}
        for name, stage in self.stages.items():
            x = stage(x)
            taps[name] = x
        return tuple(conv(taps[t]) for conv, t in zip(self.lateral_convs, self.spec.tap_points))


def build_backbone(spec: BackboneSpec, input_size: Optional[tuple[int, int]] = None) -> Backbone:
    cls = StubBackbone if spec.identity == "stub" else ResNet50Backbone
    net = cls(spec)
    net.input_size = tuple(input_size) if input_size is not None else None
    if spec.frozen:
        for p in net.parameters():
            p.requires_grad_(False)
    return net


class MaskHead(nn.Module):
    """Decode the finest refined feature into a soft mask at input resolution."""

    def __init__(self, in_ch: int, hidden: int = 32, groups: int | None = None):
        super().__init__()
        # at least two channels per group so 1x1 maps still normalize
        g = groups or max(1, hidden // 4)
        if hidden % g:
            g = 1
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, hidden, 3, padding=1),
            nn.GroupNorm(g, hidden),
            nn.ReLU(inplace=False),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GroupNorm(g, hidden),
            nn.ReLU(inplace=False),
        )
        self.proj = nn.Conv2d(hidden, 1, 1)

    def zero_init(self) -> "MaskHead":
        zero_(self.proj)
        return self

    def logits(self, feat: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
        check_finite(feat, "decoder input")
        out = self.proj(self.body(feat))
        return F.interpolate(out, size=tuple(size), mode="bilinear", align_corners=False)

    def forward(self, feat: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
        return torch.sigmoid(self.logits(feat, size))


def decode_mask(head: MaskHead, refined_f3: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    return head(refined_f3, size)
