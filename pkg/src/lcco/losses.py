"""Training losses and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .records import MASK_THRESHOLD, TrainConfig

IOU_EPS = 1e-6
BCE_EPS = 1e-7


def soft_iou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """Per-mask ``1 - (|a*b| + eps) / (|a| + |b| - |a*b| + eps)`` over ``(N, 1, H, W)``."""
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    dims = tuple(range(1, pred.ndim))
    inter = (pred * gt).sum(dims)
    union = pred.sum(dims) + gt.sum(dims) - inter
    return 1.0 - (inter + eps) / (union + eps)


def iou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return soft_iou_loss(pred, gt).mean()


def downsample_mask(gt: torch.Tensor, size: tuple[int, int], threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    """Area-average ``(N, 1, H, W)`` masks to ``size`` then binarize (strictly above threshold)."""
    pooled = F.adaptive_avg_pool2d(gt.float(), tuple(size))
    return (pooled > threshold).to(gt.dtype)


def coarse_loss(coarse_pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """IoU loss against ground truth downsampled to the coarse prediction's resolution."""
    if gt.shape[-2:] != coarse_pred.shape[-2:]:
        gt = downsample_mask(gt, coarse_pred.shape[-2:])
    return iou_loss(coarse_pred, gt)


def classification_loss(upsilon: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy averaged over the P classes."""
    if upsilon.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(upsilon.shape)} vs {tuple(target.shape)}")
    p = upsilon.clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


@dataclass
class LossReport:
    l_iou: float
    l_cs: float
    l_c: float
    l_total: float
    lambda1: float
    lambda2: float

    def as_dict(self) -> dict:
        return asdict(self)

    def log_line(self, step: int) -> str:
        return f"{step}\t{self.l_iou:.8g}\t{self.l_cs:.8g}\t{self.l_c:.8g}\t{self.l_total:.8g}"


LOG_HEADER = "step\tl_iou\tl_cs\tl_c\tl_total"


def total_loss(l_iou, l_cs, l_c, cfg: TrainConfig):
    """Weighted sum of the enabled terms. Returns ``(total_tensor, LossReport)``.

    Disabled terms, or terms passed as ``None``, contribute exactly zero.
    """
    if cfg.lambda1 < 0 or cfg.lambda2 < 0:
        raise ValueError("loss weights must be nonnegative")
    zero = None
    for t in (l_iou, l_cs, l_c):
        if torch.is_tensor(t):
            zero = torch.zeros((), dtype=t.dtype, device=t.device)
            break
    if zero is None:
        zero = torch.zeros(())

    def pick(t, enabled):
        if t is None or not enabled:
            return zero
        return t if torch.is_tensor(t) else torch.as_tensor(t, dtype=zero.dtype)

    a = pick(l_iou, cfg.loss_iou)
    b = pick(l_cs, cfg.loss_cs)
    c = pick(l_c, cfg.loss_c)
    total = a
    if cfg.lambda1 != 0:
        total = total + cfg.lambda1 * b
    if cfg.lambda2 != 0:
        total = total + cfg.lambda2 * c
    report = LossReport(float(a.detach()), float(b.detach()), float(c.detach()), float(total.detach()), cfg.lambda1, cfg.lambda2)
    return total, report


def _as_bool(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x) > MASK_THRESHOLD


def precision_score(pred, gt) -> float:
    """Percentage of pixels (object and background) labelled correctly for one mask."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return 100.0 * int((p == g).sum()) / p.size


def jaccard_score(pred, gt) -> float:
    """Foreground IoU in percent; two empty masks score 100."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * int(np.logical_and(p, g).sum()) / int(union)


def precision_metric(preds, gts) -> float:
    """Mean pixel precision over a pool of masks (first axis indexes masks)."""
    return float(np.mean([precision_score(p, g) for p, g in zip(preds, gts)]))


def jaccard_metric(preds, gts) -> float:
    return float(np.mean([jaccard_score(p, g) for p, g in zip(preds, gts)]))
