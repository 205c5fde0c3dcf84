"""Class-wise drop masks built from teacher pseudo-labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .segcore import IGNORE_VALUE


@dataclass(frozen=True)
class ClassDropConfig:
    min_ratio: float = 0.5
    max_ratio: float = 0.9
    # a number in [0, 1], or "mean" to fill with the image's per-channel mean
    fill_value: float | str = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_ratio <= self.max_ratio <= 1.0:
            raise ValueError(
                f"need 0 <= min_ratio <= max_ratio <= 1, got ({self.min_ratio}, {self.max_ratio})"
            )
        if isinstance(self.fill_value, str):
            if self.fill_value != "mean":
                raise ValueError(f"fill_value must be a number or 'mean', got {self.fill_value!r}")
        elif not 0.0 <= self.fill_value <= 1.0:
            raise ValueError(f"fill_value must lie in [0, 1], got {self.fill_value}")


@dataclass(frozen=True)
class ClassDropOutcome:
    mask: np.ndarray
    kept_classes: frozenset
    ratio: float

    def to_json(self) -> dict:
        return {"kept_classes": sorted(int(c) for c in self.kept_classes), "ratio": self.ratio}


def generate_classdrop_mask(
    pseudo, cfg: ClassDropConfig, rng: np.random.Generator, ignore_value: int = IGNORE_VALUE
) -> ClassDropOutcome:
    """Keep a random subset of the classes present in ``pseudo``; mask is 1 on kept pixels."""
    pseudo = np.asarray(pseudo)
    present = np.unique(pseudo[pseudo != ignore_value])
    if present.size == 0:
        raise ValueError("pseudo-label map has no non-ignored pixels")
    ratio = float(rng.uniform(cfg.min_ratio, cfg.max_ratio))
    # round half up, never drop every class
    k = min(max(math.floor(ratio * present.size + 0.5), 1), present.size)
    kept = rng.choice(present, size=k, replace=False)
    mask = (np.isin(pseudo, kept) & (pseudo != ignore_value)).astype(np.uint8)
    return ClassDropOutcome(mask, frozenset(int(c) for c in kept), ratio)


def apply_mask(image, mask, fill_value: float | str = 0.0) -> np.ndarray:
    """Replace every channel of mask-0 pixels by ``fill_value``."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:-1] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} disagree")
    if isinstance(fill_value, str):
        if fill_value != "mean":
            raise ValueError(f"unknown fill {fill_value!r}")
        fill = image.mean(axis=(-3, -2), keepdims=True)
    else:
        fill = np.asarray(fill_value, dtype=image.dtype)
    return np.where(mask[..., None] == 1, image, fill).astype(image.dtype, copy=False)


def combine_masks(m1, m2) -> np.ndarray:
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.shape != m2.shape:
        raise ValueError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    return (m1 * m2).astype(np.uint8)
