"""CLIP regularization of the fine feature map toward the set's most likely class."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import MLP, ConvFFN, broadcast_modulate, check_finite
from .clip_provider import ClipBackend, PromptBank, similarity
from .records import DataError, ImageSet


def most_likely_class(upsilon: torch.Tensor) -> int:
    """Argmax with ties resolved to the lowest index."""
    if upsilon.numel() == 0:
        raise ValueError("empty probability vector")
    v = upsilon.detach().reshape(-1)
    return int(torch.nonzero(v == v.max())[0, 0])


def masked_attention_norm(f: torch.Tensor, gt_mask: torch.Tensor) -> float:
    """``|| M * Softmax(f) ||_2`` with the softmax over spatial positions of each channel.

    ``f`` is ``(C, H, W)``; ``gt_mask`` is ``(1, H', W')`` and is resized
    (nearest) to ``f``'s spatial size when needed.
    """
    if f.ndim == 4:
        return float(torch.tensor([masked_attention_norm(a, m) for a, m in zip(f, gt_mask)]).mean())
    c, h, w = f.shape
    if gt_mask.shape[-2:] != (h, w):
        gt_mask = F.interpolate(gt_mask[None].float(), size=(h, w), mode="nearest")[0]
    attn = torch.softmax(f.reshape(c, -1), dim=1).reshape(c, h, w)
    return float(torch.linalg.vector_norm(gt_mask.to(attn.dtype) * attn))


class ClipRegularization(nn.Module):
    def __init__(self, num_prompts: int, dim: int, feat_channels: int, hidden: int | None = None):
        super().__init__()
        self.mlp3 = MLP(num_prompts, num_prompts, hidden or num_prompts)
        self.ffn4 = ConvFFN(feat_channels, dim)
        self.ffn5 = ConvFFN(dim, feat_channels)

    def class_logits(self, s: torch.Tensor) -> torch.Tensor:
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"expected (N, P) similarity matrix, got {tuple(s.shape)}")
        return self.mlp3(s).max(dim=0).values

    def class_probabilities(self, s: torch.Tensor) -> torch.Tensor:
        """``Softmax(MAX_rows(MLP3(s)))`` as a length-P vector."""
        return torch.softmax(self.class_logits(s), dim=0)

    def regularize(self, f3: torch.Tensor, h_txt_star: torch.Tensor) -> torch.Tensor:
        """``FFN5(FFN4(F3) * PAD(h))``; ``f3`` is ``(C, H, W)`` or ``(B, C, H, W)``."""
        check_finite(f3, "fine feature")
        single = f3.ndim == 3
        if single:
            f3 = f3[None]
        proj = self.ffn4(f3)
        if proj.shape[1] != h_txt_star.shape[-1]:
            raise ValueError(f"FFN4 emits {proj.shape[1]} channels but text embedding width is "
                             f"{h_txt_star.shape[-1]}")
        out = self.ffn5(broadcast_modulate(proj, h_txt_star))
        return out[0] if single else out

    def forward(self, f3: torch.Tensor, s: torch.Tensor, h_txt: torch.Tensor):
        """Returns ``(refined_f3, upsilon, i_star)``."""
        upsilon = self.class_probabilities(s.to(f3.dtype))
        i_star = most_likely_class(upsilon)
        return self.regularize(f3, h_txt[i_star].to(f3.dtype)), upsilon, i_star


def masked_images(s: ImageSet) -> torch.Tensor:
    if s.gt_masks is None:
        raise DataError(f"set {s.set_id!r} has no ground-truth masks")
    return s.images * s.gt_masks


def gt_class_target(s: ImageSet, bank: PromptBank, clip: ClipBackend,
                    h_txt: torch.Tensor | None = None) -> torch.Tensor:
    """One-hot length-P target: the prompt best matching the mask-cut images, summed over the set."""
    h_gt = clip.encode_images(masked_images(s))
    if h_txt is None:
        h_txt = clip.encode_prompts(bank)
    sigma = similarity(h_gt, h_txt).sigma
    target = torch.zeros(len(bank), dtype=torch.float32)
    target[most_likely_class(sigma)] = 1.0
    return target
