"""CLIP interaction: distil common text semantics, fuse them with image embeddings,
and modulate the mid-level feature map.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .blocks import MLP, ConvFFN, broadcast_modulate, check_finite
from .records import ClipBundle


class Distilled(NamedTuple):
    embeddings: torch.Tensor  # (K, D)
    indices: torch.Tensor  # (K,), descending sigma


def topk_indices(sigma: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest entries, descending; equal values keep lower index first."""
    p = sigma.shape[-1]
    if not 1 <= k <= p:
        raise ValueError(f"k={k} outside [1, {p}]")
    # stable sort on the negated values gives descending order with index tie-break
    order = torch.sort(-sigma.detach(), stable=True).indices
    return order[:k]


def distill_text(bundle: ClipBundle, k: int) -> Distilled:
    idx = topk_indices(bundle.sigma, k)
    return Distilled(bundle.h_txt[idx], idx)


class ClipInteraction(nn.Module):
    def __init__(self, dim: int, feat_channels: int, coarse_size: tuple[int, int] = (4, 4),
                 heads: int = 1, hidden: int | None = None):
        super().__init__()
        self.dim = dim
        self.coarse_size = tuple(coarse_size)
        self.mlp1 = MLP(2 * dim, dim, hidden or dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp2 = MLP(dim, dim, hidden or dim)
        self.ffn2 = ConvFFN(feat_channels, dim)
        self.ffn3 = ConvFFN(dim, feat_channels)
        ch, cw = self.coarse_size
        self.coarse_decoder = MLP(dim, ch * cw, hidden or dim)

    def refine_image_embeddings(self, h_img: torch.Tensor) -> torch.Tensor:
        """``MLP1(CAT[h_i, mean_j h_j])`` for every row."""
        if h_img.ndim != 2 or h_img.shape[0] < 1:
            raise ValueError(f"expected (N, D) embeddings, got {tuple(h_img.shape)}")
        mean = h_img.mean(dim=0, keepdim=True).expand_as(h_img)
        return self.mlp1(torch.cat([h_img, mean], dim=1))

    def fuse(self, h_hat: torch.Tensor, distilled: torch.Tensor) -> torch.Tensor:
        """One attention query per image over the N + K stacked tokens, plus residual."""
        if h_hat.shape[-1] != distilled.shape[-1]:
            raise ValueError(f"width mismatch: {h_hat.shape[-1]} vs {distilled.shape[-1]}")
        tokens = torch.cat([h_hat, distilled], dim=0)
        n = h_hat.shape[0]
        q = h_hat[:, None, :]
        kv = tokens[None].expand(n, -1, -1)
        msg, _ = self.attn(q, kv, kv, need_weights=False)
        return h_hat + self.mlp2(msg[:, 0])

    def modulate(self, f2: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """``FFN3(FFN2(F2) * PAD(z))``; ``f2`` is ``(C, H, W)`` or ``(B, C, H, W)``."""
        check_finite(f2, "mid-level feature")
        single = f2.ndim == 3
        if single:
            f2 = f2[None]
        proj = self.ffn2(f2)
        if proj.shape[1] != z.shape[-1]:
            raise ValueError(f"FFN2 emits {proj.shape[1]} channels but embedding width is {z.shape[-1]}")
        out = self.ffn3(broadcast_modulate(proj, z))
        return out[0] if single else out

    def coarse_logits(self, h_hat: torch.Tensor) -> torch.Tensor:
        single = h_hat.ndim == 1
        if single:
            h_hat = h_hat[None]
        out = self.coarse_decoder(h_hat).view(-1, 1, *self.coarse_size)
        return out[0] if single else out

    def coarse_decode(self, h_hat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.coarse_logits(h_hat))

    def forward(self, f2: torch.Tensor, bundle: ClipBundle, k: int):
        """Refine a set's ``(N, C, H, W)`` mid-level features.

        Returns ``(refined_f2, h_hat, distilled)``.
        """
        h_img = bundle.h_img.to(f2.dtype)
        distilled = distill_text(bundle, k)
        h_hat = self.refine_image_embeddings(h_img)
        z = self.fuse(h_hat, distilled.embeddings.to(f2.dtype))
        return self.modulate(f2, z), h_hat, distilled
