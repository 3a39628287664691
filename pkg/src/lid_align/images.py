"""Image ingestion and output: 8-bit PNG (grey or RGB) and ``.dt`` tensors."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import EXTENSION, as_tensor, load_tensor, save_tensor


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an image as an H x W x C float32 array with values in [0, 1] for PNGs."""
    path = Path(path)
    if path.suffix == EXTENSION:
        t = load_tensor(path)
        if t.ndim == 2:
            t = t[:, :, None]
        if t.ndim != 3:
            raise ValueError(f"{path}: image tensors must be H x W or H x W x C, got {t.shape}")
        return t
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise ValueError(f"{path}: only 8-bit grayscale or RGB PNGs are supported (mode {im.mode})")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def save_image(image, path: str | os.PathLike) -> None:
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if path.suffix == EXTENSION:
        save_tensor(as_tensor(img), path)
        return
    if img.shape[-1] not in (1, 3):
        raise ValueError(f"PNG output needs 1 or 3 channels, got {img.shape[-1]}")
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8[:, :, 0] if u8.shape[-1] == 1 else u8).save(path)


def list_images(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", EXTENSION))
