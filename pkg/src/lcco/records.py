"""Shared records for co-segmentation: image sets, CLIP bundles, masks, configs.

Tensors follow the torch layout convention: images are ``(N, 3, H, W)`` floats in
``[0, 1]`` and masks are ``(N, 1, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import torch

MASK_THRESHOLD = 0.5
CLASS_SLOT = "[CLASS]"

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "dining table", "dog", "horse", "motorbike", "person",
    "potted plant", "sheep", "sofa", "train", "tv monitor",
)


class CosegError(Exception):
    """Base class for errors raised by this package."""


class DataError(CosegError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(CosegError, FloatingPointError):
    """A computation produced non-finite values."""


@dataclass(frozen=True)
class ImageSet:
    images: torch.Tensor
    gt_masks: Optional[torch.Tensor] = None
    set_id: str = ""
    class_hint: Optional[str] = None

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return int(self.images.shape[-2]), int(self.images.shape[-1])

    @classmethod
    def from_list(cls, images: Sequence[torch.Tensor], gt_masks=None, **kw) -> "ImageSet":
        """Build a set from per-image ``(3, H, W)`` tensors, validating shapes first."""
        _check_list(images, gt_masks)
        imgs = torch.stack(list(images))
        masks = torch.stack(list(gt_masks)) if gt_masks is not None else None
        return validate_image_set(cls(imgs, masks, **kw))


def _check_list(images, gt_masks) -> None:
    if len(images) == 0:
        raise DataError("empty image set")
    ref = tuple(images[0].shape)
    for idx, img in enumerate(images):
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"image {idx}: expected (3, H, W), got {tuple(img.shape)}")
        if tuple(img.shape) != ref:
            raise DataError(f"image {idx}: shape mismatch {tuple(img.shape)} vs {ref}")
    if gt_masks is None:
        return
    if len(gt_masks) != len(images):
        raise DataError(f"mask count mismatch: {len(gt_masks)} masks for {len(images)} images")
    for idx, m in enumerate(gt_masks):
        if tuple(m.shape) != (1,) + ref[1:]:
            raise DataError(f"mask {idx}: shape mismatch {tuple(m.shape)} vs {(1,) + ref[1:]}")


def validate_image_set(s: ImageSet) -> ImageSet:
    """Return ``s`` unchanged if it satisfies every set invariant, else raise DataError."""
    imgs = s.images
    if imgs.ndim != 4:
        raise DataError(f"images must be (N, 3, H, W), got {tuple(imgs.shape)}")
    if imgs.shape[0] == 0:
        raise DataError("empty image set")
    if imgs.shape[1] != 3:
        raise DataError(f"images must have 3 channels, got {imgs.shape[1]}")
    if not torch.isfinite(imgs).all() or imgs.min() < 0 or imgs.max() > 1:
        raise DataError("image values must be finite and within [0, 1]")
    if s.gt_masks is not None:
        m = s.gt_masks
        if m.shape[0] != imgs.shape[0]:
            raise DataError(f"mask count mismatch: {m.shape[0]} masks for {imgs.shape[0]} images")
        if m.ndim != 4 or m.shape[1] != 1 or m.shape[2:] != imgs.shape[2:]:
            raise DataError(f"masks must be (N, 1, H, W) matching images, got {tuple(m.shape)}")
        if not bool(((m == 0) | (m == 1)).all()):
            raise DataError("ground-truth masks must be binary")
    return s


@dataclass(frozen=True)
class ClipBundle:
    """CLIP embeddings for one set and their similarity profile."""

    h_img: torch.Tensor  # (N, D)
    h_txt: torch.Tensor  # (P, D)
    s: torch.Tensor  # (N, P)
    sigma: torch.Tensor  # (P,)

    @property
    def d(self) -> int:
        return int(self.h_img.shape[1])


@dataclass
class MaskBatch:
    pred: torch.Tensor
    gt: Optional[torch.Tensor] = None
    coarse_pred: Optional[torch.Tensor] = None
    threshold: float = MASK_THRESHOLD

    def binary(self) -> torch.Tensor:
        return (self.pred > self.threshold).to(self.pred.dtype)


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    k: int = 5
    prompt_vocabulary: list[str] = field(default_factory=lambda: list(VOC_CLASSES))
    prompt_template: str = "A photo of a [CLASS]"
    set_size_train: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 1000
    seed: int = 0
    isfc: bool = True
    clip_interaction: bool = True
    clip_regularization: bool = True
    loss_iou: bool = True
    loss_cs: bool = True
    loss_c: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 1 <= self.k <= len(self.prompt_vocabulary):
            raise ValueError(f"k={self.k} outside [1, {len(self.prompt_vocabulary)}]")
        if self.prompt_template.count(CLASS_SLOT) != 1:
            raise ValueError(f"prompt template needs exactly one {CLASS_SLOT} slot")
        if self.set_size_train < 1:
            raise ValueError("set_size_train must be positive")

    def to_dict(self) -> dict:
        return asdict(self)
