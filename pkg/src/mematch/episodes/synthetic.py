"""Procedural glyph classes for fast, controllable experiments.

Each class is a fixed binary mask on a ``glyph x glyph`` grid: a random
field blurred with a Gaussian of width ``smooth`` cells, keeping the
brightest ``density`` fraction (``smooth=0`` gives scattered pixels, which
do not survive repeated pooling). An instance shifts the mask by up to ``shift`` cells, flips each cell with
probability ``flip``, upsamples by ``scale`` (so four 2x2 pooling stages
fit) and adds clipped Gaussian pixel noise.
"""

from __future__ import annotations

import numpy as np

from .dataset import Dataset, ImageSpec


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = mask[ys, xs]
    return out


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a square field (zero padding)."""
    idx = np.arange(field.shape[0])
    g = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / sigma) ** 2)
    return g @ field @ g.T


def class_mask(rng: np.random.Generator, glyph: int, density: float, smooth: float) -> np.ndarray:
    """Random binary mask with ``round(density * glyph**2)`` cells set.

    ``smooth > 0`` blurs the random field before thresholding, which gives
    blob-like glyphs whose structure survives repeated pooling.
    """
    field = rng.random((glyph, glyph))
    if smooth > 0:
        field = _smooth(field, smooth)
    k = int(round(density * glyph * glyph))
    mask = np.zeros(glyph * glyph, dtype=np.float32)
    mask[np.argsort(-field, axis=None, kind="stable")[:k]] = 1.0
    return mask.reshape(glyph, glyph)


def glyph_dataset(
    n_classes: int,
    per_class: int,
    rng: np.random.Generator,
    glyph: int = 8,
    scale: int = 2,
    density: float = 0.4,
    smooth: float = 1.0,
    flip: float = 0.02,
    shift: int = 0,
    noise: float = 0.2,
    prefix: str = "glyph",
    split: str = "train",
) -> Dataset:
    size = glyph * scale
    classes = {}
    for c in range(n_classes):
        mask = class_mask(rng, glyph, density, smooth)
        imgs = np.empty((per_class, 1, size, size), dtype=np.float32)
        for i in range(per_class):
            dy, dx = rng.integers(-shift, shift + 1, size=2) if shift else (0, 0)
            inst = _shifted(mask, int(dy), int(dx))
            inst = np.where(rng.random(inst.shape) < flip, 1.0 - inst, inst)
            inst = np.kron(inst, np.ones((scale, scale), dtype=np.float32))
            inst = inst + rng.normal(0.0, noise, size=inst.shape)
            imgs[i, 0] = np.clip(inst, 0.0, 1.0)
        classes[f"{prefix}{c:04d}"] = imgs
    return Dataset(classes, ImageSpec(1, size, size), split)


def glyph_splits(
    seed: int,
    train_classes: int = 32,
    test_classes: int = 8,
    val_classes: int = 0,
    per_class: int = 20,
    **kwargs,
) -> dict[str, Dataset]:
    """Class-disjoint train/test (and optional val) glyph splits from one seed."""
    from ..rng import stream

    rng = stream(seed, "data")
    out = {"train": glyph_dataset(train_classes, per_class, rng, prefix="tr", split="train", **kwargs)}
    if val_classes:
        out["val"] = glyph_dataset(val_classes, per_class, rng, prefix="va", split="val", **kwargs)
    out["test"] = glyph_dataset(test_classes, per_class, rng, prefix="te", split="test", **kwargs)
    return out
