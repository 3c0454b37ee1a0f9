"""On-disk dataset layout.

Each image set lives in its own directory::

    <set>/images/*.png   8-bit RGB
    <set>/masks/*.png    optional, 8-bit grayscale (0 background, 255 object),
                         same filenames as images/

A manifest is a plain text file listing one set directory per line. Relative
paths resolve against the manifest's directory; blank lines and ``#`` comments
are skipped.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .records import DataError, ImageSet, MASK_THRESHOLD, validate_image_set

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def list_images(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_rgb(path: Path, size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Read an image as a ``(3, H, W)`` float tensor in ``[0, 1]``."""
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def read_mask(path: Path, size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """Read a grayscale mask as a binary ``(1, H, W)`` float tensor."""
    try:
        img = Image.open(path).convert("L")
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from exc
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    arr = np.asarray(img, dtype=np.uint8)
    return torch.from_numpy((arr >= 128).astype(np.float32))[None]


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` float in [0, 1] -> ``(H, W, C)`` uint8 (or ``(H, W)`` for C=1)."""
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).cpu().numpy()
    arr = np.transpose(arr, (1, 2, 0))
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def load_image_set(directory: Path, size: Optional[tuple[int, int]] = None,
                   require_masks: bool = False) -> ImageSet:
    directory = Path(directory)
    paths = list_images(directory / "images")
    if not paths:
        raise DataError(f"no images under {directory / 'images'}")
    if size is None:
        with Image.open(paths[0]) as first:
            size = (first.height, first.width)
    images = [read_rgb(p, size) for p in paths]
    masks = None
    mask_dir = directory / "masks"
    if mask_dir.is_dir():
        masks = []
        for p in paths:
            mp = mask_dir / p.name
            if not mp.exists():
                mp = mask_dir / (p.stem + ".png")
            if not mp.exists():
                raise DataError(f"missing mask for {p.name} in {mask_dir}")
            masks.append(read_mask(mp, size))
    elif require_masks:
        raise DataError(f"ground-truth masks required but {mask_dir} is missing")
    return ImageSet.from_list(images, masks, set_id=str(directory), class_hint=directory.name)


def load_image_dir(directory: Path, size: tuple[int, int]) -> tuple[ImageSet, list[Path], list[tuple[int, int]]]:
    """Load a flat directory of images (no masks) for inference.

    Returns the set plus source paths and original ``(H, W)`` sizes.
    """
    paths = list_images(directory)
    if len(paths) < 2:
        raise DataError(f"need at least 2 images in {directory}, found {len(paths)}")
    sizes = []
    for p in paths:
        try:
            with Image.open(p) as im:
                sizes.append((im.height, im.width))
        except OSError as exc:
            raise DataError(f"unreadable image {p}: {exc}") from exc
    images = [read_rgb(p, size) for p in paths]
    return ImageSet.from_list(images, set_id=str(directory)), paths, sizes


def save_image_set(s: ImageSet, directory: Path) -> Path:
    directory = Path(directory)
    validate_image_set(s)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(s.images):
        Image.fromarray(to_uint8(img)).save(directory / "images" / f"{i:04d}.png")
    if s.gt_masks is not None:
        (directory / "masks").mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(s.gt_masks):
            Image.fromarray(to_uint8(m)).save(directory / "masks" / f"{i:04d}.png")
    return directory


def read_manifest(path: Path) -> list[Path]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        if not p.is_absolute():
            p = path.parent / p
        if not p.is_dir():
            raise DataError(f"manifest {path}: set directory not found: {p}")
        out.append(p)
    if not out:
        raise DataError(f"manifest {path} lists no sets")
    return out


def write_manifest(path: Path, set_dirs: list[Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{Path(d).resolve()}\n" for d in set_dirs))
    return path


def write_mask_png(mask: torch.Tensor, path: Path, size: Optional[tuple[int, int]] = None,
                   threshold: float = MASK_THRESHOLD) -> None:
    """Binarize a ``(1, H, W)`` soft mask and write it as an 8-bit 0/255 PNG."""
    arr = ((mask[0] > threshold).cpu().numpy().astype(np.uint8)) * 255
    img = Image.fromarray(arr)
    if size is not None and img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.NEAREST)
    img.save(path)


def write_overlay(image_path: Path, mask_path: Path, out_path: Path, alpha: float = 0.5) -> None:
    base = Image.open(image_path).convert("RGB")
    mask = np.asarray(Image.open(mask_path).convert("L")) > 127
    arr = np.asarray(base, dtype=np.float32)
    tint = np.array([255.0, 0.0, 0.0])
    arr[mask] = (1 - alpha) * arr[mask] + alpha * tint
    Image.fromarray(arr.round().astype(np.uint8)).save(out_path)
