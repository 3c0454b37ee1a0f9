"""Synthetic co-segmentation data with matching CLIP fixtures.

Every set shares one object: a disk of a fixed colour per class, placed at a
random position over a smooth random background. The fixture store makes the
class prompt the best match for every image, and an even closer match for the
mask-cut images, so the text-side machinery has a well-defined answer.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .clip_provider import FixtureStore, PromptBank, hash_vector, image_key, text_key, unit
from .dataio import save_image_set, write_manifest
from .records import ImageSet

CLASS_COLOURS = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9], [0.9, 0.8, 0.1],
    [0.8, 0.1, 0.8], [0.1, 0.8, 0.8], [0.95, 0.5, 0.1], [0.5, 0.3, 0.1],
])


def _quantize(x: torch.Tensor) -> torch.Tensor:
    return (x * 255.0).round() / 255.0


def make_toy_set(n: int = 5, size: int = 64, class_index: int = 0, seed: int = 0,
                 radius: tuple[float, float] = (0.18, 0.3)) -> ImageSet:
    rng = np.random.default_rng(seed)
    colour = CLASS_COLOURS[class_index % len(CLASS_COLOURS)]
    yy, xx = np.mgrid[0:size, 0:size] / size
    images, masks = [], []
    for _ in range(n):
        coarse = torch.from_numpy(rng.uniform(0.2, 0.6, size=(1, 3, 4, 4))).float()
        bg = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)[0]
        bg = bg * 0.6 + 0.4 * bg.mean(0, keepdim=True)  # desaturate
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(r, 1 - r, size=2)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r ** 2
        m = torch.from_numpy(disk.astype(np.float32))[None]
        obj = torch.tensor(colour, dtype=torch.float32).view(3, 1, 1)
        obj = obj + 0.04 * torch.from_numpy(rng.standard_normal((3, size, size))).float()
        img = (bg * (1 - m) + obj * m).clamp(0, 1)
        images.append(_quantize(img))
        masks.append(m)
    return ImageSet.from_list(images, masks, set_id=f"toy-{class_index}-{seed}")


def toy_fixtures(sets: Sequence[tuple[ImageSet, int]], bank: PromptBank, dim: int = 32,
                 seed: int = 0, image_noise: float = 0.8, masked_noise: float = 0.3,
                 store: Optional[FixtureStore] = None) -> FixtureStore:
    """Fixture embeddings for ``(set, class index)`` pairs.

    Prompts get :func:`hash_vector` embeddings. An image of class ``k`` gets
    ``unit(t_k + image_noise * g)`` and its mask-cut version
    ``unit(t_k + masked_noise * g')``, with ``g, g'`` standard normal scaled by
    ``1/sqrt(dim)`` (norm about 1).
    """
    rng = np.random.default_rng(seed)
    store = store or FixtureStore(dim)
    txt = []
    for p in bank.rendered:
        v = hash_vector(text_key(p), dim)
        store.put(text_key(p), v)
        txt.append(v)
    for s, k in sets:
        for i, img in enumerate(s.images):
            store.put(image_key(img), unit(txt[k] + image_noise * rng.standard_normal(dim) / np.sqrt(dim)))
            if s.gt_masks is not None:
                cut = img * s.gt_masks[i]
                store.put(image_key(cut), unit(txt[k] + masked_noise * rng.standard_normal(dim) / np.sqrt(dim)))
    return store


def write_toy_dataset(root: Path, vocabulary: Sequence[str], classes: Sequence[int] = (0, 1),
                      sets_per_class: int = 1, n: int = 5, size: int = 64, dim: int = 32,
                      template: str = "A photo of a [CLASS]", seed: int = 0) -> dict:
    """Write set directories, a manifest and a fixture file under ``root``.

    Returns a dict with ``manifest``, ``fixtures`` and ``set_dirs`` paths.
    """
    root = Path(root)
    bank = PromptBank(tuple(vocabulary), template)
    pairs, dirs = [], []
    for k in classes:
        for r in range(sets_per_class):
            s = make_toy_set(n=n, size=size, class_index=k, seed=seed + 1000 * k + r)
            d = save_image_set(s, root / f"{vocabulary[k].replace(' ', '_')}_{r}")
            pairs.append((s, k))
            dirs.append(d)
    store = toy_fixtures(pairs, bank, dim=dim, seed=seed)
    fixtures = store.save(root / "fixtures.npz")
    manifest = write_manifest(root / "manifest.txt", dirs)
    return {"manifest": manifest, "fixtures": fixtures, "set_dirs": dirs}
