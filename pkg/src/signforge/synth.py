"""Synthetic shape dataset: circles, squares, triangles on noise backgrounds.

A generatable desk-scale stand-in corpus for end-to-end training runs. The
three classes are written to folders A/B/C so the ordinary manifest tooling
applies; random position and size keep raw pixels from being linearly
separable while staying easy for a small convnet.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, build_manifest

SHAPE_FOLDERS = {"circle": "A", "square": "B", "triangle": "C"}


def _render(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One outlined shape at random position/size over background noise.

    Outlines (rather than filled interiors) keep the class signal in edge
    statistics, which survives pooling; the randomized geometry defeats a
    raw-pixel linear rule.
    """
    bg = rng.normal(50, 8, (size, size, 3))
    fg_level = rng.uniform(205, 225)
    cx = rng.uniform(0.38, 0.62) * size
    cy = rng.uniform(0.38, 0.62) * size
    half = rng.uniform(0.24, 0.40) * size
    t = max(3.5, 0.12 * size)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "circle":
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        mask = (r2 <= half ** 2) & (r2 >= (half - t) ** 2)
    elif kind == "square":
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy))
        mask = (d <= half) & (d >= half - t)
    elif kind == "triangle":
        top, bottom = cy - half, cy + half
        frac = np.clip((yy - top) / (bottom - top), 0, 1)
        inside = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * half)
        frac_in = np.clip((yy - top - t) / (bottom - top), 0, 1)
        inner = ((yy >= top + t) & (yy <= bottom - t)
                 & (np.abs(xx - cx) <= frac_in * half - t * 0.8))
        mask = inside & ~inner
    else:
        raise ValueError(f"unknown shape {kind!r}")
    img = bg.copy()
    img[mask] = fg_level + rng.normal(0, 5, (int(mask.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def synth_shapes(out_dir: str, n_per_class: int = 200, size: int = 32,
                 seed: int = 0, val_fraction: float = 0.2) -> DatasetManifest:
    """Write the PNG tree and manifest.json under `out_dir`; deterministic
    bytes for a given (n, size, seed)."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    root = Path(out_dir)
    for kind, folder in SHAPE_FOLDERS.items():
        d = root / folder
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = _render(kind, size, rng)
            Image.fromarray(img).save(d / f"{kind}_{i:04d}.png")
    manifest = build_manifest(str(root), image_size=(size, size),
                              val_fraction=val_fraction, seed=seed)
    manifest.save(str(root / "manifest.json"))
    return manifest
