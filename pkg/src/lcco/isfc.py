"""Image set feature correspondence: cross-attention message passing over a complete graph.

Each image's coarse feature map is a node. For every ordered pair ``(i, j)``
with ``i != j`` the node ``i`` receives a message ``Att(F_i, F_j, F_j)`` whose
tokens are spatial positions; the per-edge updates are then averaged with
softmax weights taken across the ``j`` axis, independently at every channel
and position, and passed through a convolution.
"""
from __future__ import annotations

import torch
from torch import nn

from .blocks import ConvFFN


class ImageSetCorrespondence(nn.Module):
    def __init__(self, channels: int, heads: int = 4, ffn_hidden: int | None = None):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.channels = channels
        self.heads = heads
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.ffn1 = ConvFFN(2 * channels, channels, ffn_hidden or 2 * channels)
        self.fuse_conv = nn.Conv2d(channels, channels, 3, padding=1)

    def message(self, f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
        """Attention message from ``f_j`` to ``f_i``; both ``(B, C, H, W)``."""
        b, c, h, w = f_i.shape
        q = f_i.flatten(2).transpose(1, 2)
        kv = f_j.flatten(2).transpose(1, 2)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return out.transpose(1, 2).reshape(b, c, h, w)

    def pairwise_update(self, f_i: torch.Tensor, f_j: torch.Tensor) -> torch.Tensor:
        """``F_i + FFN1(F_i || m_{j->i})``. Accepts ``(C, H, W)`` or batched ``(B, C, H, W)``."""
        if f_i.shape != f_j.shape:
            raise ValueError(f"shape mismatch: {tuple(f_i.shape)} vs {tuple(f_j.shape)}")
        single = f_i.ndim == 3
        if single:
            f_i, f_j = f_i[None], f_j[None]
        msg = self.message(f_i, f_j)
        out = f_i + self.ffn1(torch.cat([f_i, msg], dim=1))
        return out[0] if single else out

    @staticmethod
    def weights(updates: torch.Tensor) -> torch.Tensor:
        """Softmax across the stacked set axis (dim 0)."""
        return torch.softmax(updates, dim=0)

    def aggregate(self, updates) -> torch.Tensor:
        """Weighted average of the ``N-1`` updates for one node, followed by the fuse conv.

        ``updates`` is a list of ``(C, H, W)`` maps or a stacked ``(N-1, C, H, W)`` tensor.
        """
        if isinstance(updates, (list, tuple)):
            if not updates:
                raise ValueError("no updates to aggregate: a single-image set bypasses correspondence")
            ref = updates[0].shape
            if any(u.shape != ref for u in updates):
                raise ValueError("all updates must share one shape")
            updates = torch.stack(list(updates))
        elif updates.shape[0] == 0:
            raise ValueError("no updates to aggregate: a single-image set bypasses correspondence")
        alpha = self.weights(updates)
        mixed = (alpha * updates).sum(dim=0)
        return self.fuse_conv(mixed[None])[0]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.refine_set(features)

    def refine_set(self, features) -> torch.Tensor:
        """Refine every node of a ``(N, C, H, W)`` set; output order matches input order.

        A set of one image passes through unchanged.
        """
        if isinstance(features, (list, tuple)):
            features = torch.stack(list(features))
        n = features.shape[0]
        if n < 2:
            return features
        # every ordered pair (i, j), i != j, in one batched attention call
        ii, jj = zip(*[(i, j) for i in range(n) for j in range(n) if i != j])
        ii, jj = torch.tensor(ii), torch.tensor(jj)
        upd = self.pairwise_update(features[ii], features[jj])
        upd = upd.view(n, n - 1, *features.shape[1:])
        alpha = torch.softmax(upd, dim=1)
        mixed = (alpha * upd).sum(dim=1)
        return self.fuse_conv(mixed)
