"""Frozen CLIP embeddings: prompt bank, encoder backends and the similarity matrix.

Two backends share one interface (``encode_images``, ``encode_prompts``):

``FixtureClip``
    Replays unit vectors from a :class:`FixtureStore`. Keys are
    ``"img:<sha256>"`` for images and ``"txt:<prompt>"`` for prompts. The image
    hash covers the 8-bit quantized ``(H, W, 3)`` pixels and the shape. In
    ``hash`` mode a miss is filled by :func:`hash_vector`, a seeded Gaussian
    draw normalized to unit length, so any key can be regenerated.

``HFClip``
    The pretrained ViT-B/16 CLIP via ``transformers`` (optional dependency).

Fixture file format (``.npz``): ``keys`` (M strings), ``vectors`` (M x D
float32, unit rows), ``dim`` (scalar D), ``format`` (``"lcco-fixtures/1"``).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .records import CLASS_SLOT, ClipBundle, DataError

FIXTURE_FORMAT = "lcco-fixtures/1"
DEFAULT_CLIP = "openai/clip-vit-base-patch16"


class FixtureMiss(DataError, KeyError):
    pass


@dataclass(frozen=True)
class PromptBank:
    vocabulary: tuple[str, ...]
    template: str = "A photo of a [CLASS]"

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if self.template.count(CLASS_SLOT) != 1:
            raise ValueError(f"template needs exactly one {CLASS_SLOT} slot: {self.template!r}")
        if not self.vocabulary:
            raise ValueError("empty vocabulary")
        if len(set(self.rendered)) != len(self.rendered):
            raise ValueError("duplicate prompts in bank")

    @property
    def rendered(self) -> tuple[str, ...]:
        return tuple(self.template.replace(CLASS_SLOT, c) for c in self.vocabulary)

    def __len__(self) -> int:
        return len(self.vocabulary)


def image_key(image: torch.Tensor) -> str:
    """Content key of a ``(3, H, W)`` image in [0, 1]."""
    arr = (image.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).contiguous().cpu().numpy()
    h = hashlib.sha256()
    h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
    h.update(arr.tobytes())
    return "img:" + h.hexdigest()


def text_key(prompt: str) -> str:
    return "txt:" + prompt


def hash_vector(key: str, dim: int) -> np.ndarray:
    """Unit vector seeded by the first 8 bytes of ``sha256(key)`` (big endian)."""
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big")
    v = np.random.default_rng(seed).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return (v / np.linalg.norm(v, axis=-1, keepdims=True)).astype(np.float32)


class FixtureStore:
    """Recorded unit-norm embeddings keyed by content hash or prompt string."""

    def __init__(self, dim: int, entries: Optional[dict[str, np.ndarray]] = None):
        self.dim = int(dim)
        self._entries: dict[str, np.ndarray] = {}
        for k, v in (entries or {}).items():
            self.put(k, v)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[str]:
        return list(self._entries)

    def get(self, key: str) -> np.ndarray:
        try:
            return self._entries[key]
        except KeyError:
            raise FixtureMiss(f"fixture miss: {key}") from None

    def put(self, key: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"vector width {vec.shape[0]} != store width {self.dim}")
        if abs(float(np.linalg.norm(vec.astype(np.float64))) - 1.0) > 1e-5:
            vec = unit(vec)
        self._entries[key] = vec

    def put_image(self, image: torch.Tensor, vec) -> str:
        key = image_key(image)
        self.put(key, vec)
        return key

    def put_prompt(self, prompt: str, vec) -> str:
        key = text_key(prompt)
        self.put(key, vec)
        return key

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = self.keys()
        vectors = np.stack([self._entries[k] for k in keys]) if keys else np.zeros((0, self.dim), np.float32)
        with open(path, "wb") as fh:
            np.savez(fh, keys=np.asarray(keys, dtype=str), vectors=vectors,
                     dim=np.int64(self.dim), format=np.asarray(FIXTURE_FORMAT))
        return path

    @classmethod
    def load(cls, path: Path) -> "FixtureStore":
        try:
            with np.load(path, allow_pickle=False) as z:
                if str(z["format"]) != FIXTURE_FORMAT:
                    raise DataError(f"{path}: unknown fixture format {z['format']}")
                dim = int(z["dim"])
                keys, vectors = z["keys"], z["vectors"]
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read fixture file {path}: {exc}") from exc
        if vectors.shape != (len(keys), dim):
            raise DataError(f"{path}: vectors shape {vectors.shape} disagrees with header width {dim}")
        store = cls(dim)
        store._entries = {str(k): v.astype(np.float32) for k, v in zip(keys, vectors)}
        return store


class ClipBackend(nn.Module):
    """Common surface; subclasses are frozen and never train."""

    dim: int

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_prompts(self, bank: PromptBank) -> torch.Tensor:
        raise NotImplementedError

    def train(self, mode: bool = True):
        # stays in eval mode no matter what the parent module does
        return super().train(False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        tensors = dict(self.named_parameters())
        tensors.update(self.named_buffers())
        for name, t in sorted(tensors.items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class FixtureClip(ClipBackend):
    def __init__(self, store: FixtureStore, mode: str = "strict"):
        super().__init__()
        if mode not in ("strict", "hash"):
            raise ValueError(f"mode must be 'strict' or 'hash', got {mode!r}")
        self.store = store
        self.mode = mode
        self.dim = store.dim
        # exposes the recorded vectors as frozen state for checksumming
        self._sync_buffer()

    def _sync_buffer(self):
        keys = sorted(self.store.keys())
        table = np.stack([self.store.get(k) for k in keys]) if keys else np.zeros((0, self.dim), np.float32)
        self.register_buffer("table", torch.from_numpy(table.copy()), persistent=False)

    def _lookup(self, key: str) -> np.ndarray:
        if key in self.store:
            return self.store.get(key)
        if self.mode == "hash":
            return hash_vector(key, self.dim)
        raise FixtureMiss(f"fixture miss: {key}")

    @torch.no_grad()
    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        rows = [self._lookup(image_key(img)) for img in images]
        return torch.from_numpy(np.stack(rows))

    @torch.no_grad()
    def encode_prompts(self, bank: PromptBank) -> torch.Tensor:
        rows = [self._lookup(text_key(p)) for p in bank.rendered]
        return torch.from_numpy(np.stack(rows))


class HFClip(ClipBackend):
    """Pretrained CLIP through ``transformers``; weights are frozen at load."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, name: str = DEFAULT_CLIP, device: str = "cpu"):
        super().__init__()
        from transformers import CLIPModel, CLIPTokenizer

        self.model = CLIPModel.from_pretrained(name).to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(name)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.dim = self.model.config.projection_dim
        self.image_size = self.model.config.vision_config.image_size
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1), persistent=False)

    @torch.no_grad()
    def encode_images(self, images):
        x = F.interpolate(images.to(self.mean.device).float(), size=(self.image_size,) * 2,
                          mode="bicubic", align_corners=False).clamp(0, 1)
        emb = self.model.get_image_features(pixel_values=(x - self.mean) / self.std)
        if not torch.is_tensor(emb):
            emb = emb.pooler_output
        return F.normalize(emb.float(), dim=-1).cpu()

    @torch.no_grad()
    def encode_prompts(self, bank):
        tok = self.tokenizer(list(bank.rendered), padding=True, return_tensors="pt")
        tok = {k: v.to(self.mean.device) for k, v in tok.items()}
        emb = self.model.get_text_features(**tok)
        if not torch.is_tensor(emb):
            emb = emb.pooler_output
        return F.normalize(emb.float(), dim=-1).cpu()


def similarity(h_img: torch.Tensor, h_txt: torch.Tensor) -> ClipBundle:
    """Cosine similarity of unit rows plus the column sums over the image rows."""
    if h_img.shape[-1] != h_txt.shape[-1]:
        raise ValueError(f"embedding width mismatch: {h_img.shape[-1]} vs {h_txt.shape[-1]}")
    s = h_img @ h_txt.T
    return ClipBundle(h_img=h_img, h_txt=h_txt, s=s, sigma=s.sum(dim=0))


def build_clip(backend: str, fixtures: Optional[Path] = None, mode: str = "strict",
               name: str = DEFAULT_CLIP, dim: int = 512) -> ClipBackend:
    if backend == "real":
        return HFClip(name)
    if backend != "fixture":
        raise ValueError(f"unknown clip backend {backend!r}")
    store = FixtureStore.load(fixtures) if fixtures else FixtureStore(dim)
    return FixtureClip(store, mode=mode)


def record_fixtures(images: Iterable[torch.Tensor], prompts: Sequence[str], out: Path,
                    dim: int = 512, encoder: Optional[ClipBackend] = None,
                    store: Optional[FixtureStore] = None) -> FixtureStore:
    """Populate a fixture store for ``images`` and ``prompts`` and write it to ``out``.

    With no ``encoder`` the vectors come from :func:`hash_vector`.
    """
    if encoder is not None:
        dim = encoder.dim
    store = store or FixtureStore(dim)
    images = list(images)
    if encoder is None:
        for img in images:
            key = image_key(img)
            if key not in store:
                store.put(key, hash_vector(key, dim))
        for p in prompts:
            key = text_key(p)
            if key not in store:
                store.put(key, hash_vector(key, dim))
    else:
        if images:
            vecs = encoder.encode_images(torch.stack(images))
            for img, v in zip(images, vecs):
                store.put_image(img, v.numpy())
        if prompts:
            bank = PromptBank(tuple(prompts), template=CLASS_SLOT)
            for p, v in zip(prompts, encoder.encode_prompts(bank)):
                store.put_prompt(p, v.numpy())
    store.save(out)
    return store
