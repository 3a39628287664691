"""Seeded procedural textures (stripes, checkers, gradients) used as toy data."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

KINDS = ("stripes", "checkers", "gradient")


def _two_colors(rng, channels):
    base = rng.uniform(0.15, 0.85, size=channels)
    offset = rng.uniform(0.15, 0.3, size=channels) * rng.choice([-1.0, 1.0], size=channels)
    return base, np.clip(base + offset, 0.0, 1.0)


def make_texture(rng: np.random.Generator, size: int = 32, channels: int = 3,
                 kind: str | None = None) -> np.ndarray:
    """One H x W x C texture in [0, 1]."""
    kind = kind or KINDS[int(rng.integers(len(KINDS)))]
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    a, b = _two_colors(rng, channels)
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 10.0)
        phase = rng.uniform(0, 2 * np.pi)
        u = rows * np.sin(theta) + cols * np.cos(theta)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
    elif kind == "checkers":
        cell = int(rng.integers(3, 8))
        r0, c0 = rng.integers(0, cell, size=2)
        s = (((rows + r0) // cell + (cols + c0) // cell) % 2).astype(np.float64)
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        u = rows * np.sin(theta) + cols * np.cos(theta)
        s = (u - u.min()) / (u.max() - u.min())
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    img = a[None, None, :] * (1.0 - s[..., None]) + b[None, None, :] * s[..., None]
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def texture_batch(n: int, size: int = 32, channels: int = 3, seed: int = 0,
                  kind: str | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([make_texture(rng, size, channels, kind) for _ in range(n)])


def write_texture_dataset(directory: str | os.PathLike, n: int = 64, size: int = 32,
                          channels: int = 3, seed: int = 0) -> list[Path]:
    from .images import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(texture_batch(n, size, channels, seed)):
        p = d / f"texture_{i:04d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
