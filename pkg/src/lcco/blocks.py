"""Small building blocks shared by the refinement modules."""
from __future__ import annotations

import torch
from torch import nn


class ConvFFN(nn.Sequential):
    """Two 1x1 convolutions with a ReLU in between."""

    def __init__(self, in_ch: int, out_ch: int, hidden: int | None = None):
        hidden = hidden or max(in_ch, out_ch)
        super().__init__(
            nn.Conv2d(in_ch, hidden, 1),
            nn.ReLU(inplace=False),
            nn.Conv2d(hidden, out_ch, 1),
        )

    @property
    def out_layer(self) -> nn.Conv2d:
        return self[-1]


class MLP(nn.Sequential):
    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        hidden = hidden or max(in_dim, out_dim)
        super().__init__(
            nn.Linear(in_dim, hidden),
            nn.ReLU(inplace=False),
            nn.Linear(hidden, out_dim),
        )

    @property
    def out_layer(self) -> nn.Linear:
        return self[-1]


def zero_(layer: nn.Module) -> nn.Module:
    """Zero a layer's weight and bias in place (used to silence residual branches)."""
    with torch.no_grad():
        for p in layer.parameters():
            p.zero_()
    return layer


def broadcast_modulate(feat: torch.Tensor, vec: torch.Tensor) -> torch.Tensor:
    """Multiply a ``(B, D, H, W)`` map channel-wise by a ``(D,)`` or ``(B, D)`` vector.

    The vector is broadcast over every spatial position.
    """
    if vec.ndim == 1:
        vec = vec[None]
    if feat.shape[1] != vec.shape[-1]:
        raise ValueError(f"channel mismatch: feature has {feat.shape[1]}, embedding has {vec.shape[-1]}")
    return feat * vec[:, :, None, None]


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    from .records import NumericalError

    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values in {what}")
    return x
