"""Target-view augmentations: random crop (shared geometry), color jitter, Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentationConfig:
    gaussian_noise: bool = True
    noise_sigma: float = 0.05
    color_jitter: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    hue: float = 0.05
    random_crop: bool = True
    crop_size: tuple[int, int] = (48, 48)

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))
        for name in ("noise_sigma", "brightness", "contrast", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.crop_size) != 2 or min(self.crop_size) < 1:
            raise ValueError(f"crop_size must be two positive ints, got {self.crop_size}")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(gaussian_noise=False, color_jitter=False, random_crop=False)


@dataclass(frozen=True)
class Geometry:
    """A crop box resized (nearest neighbour) back to ``out_h x out_w``."""

    top: int
    left: int
    height: int
    width: int
    out_h: int
    out_w: int

    @classmethod
    def full(cls, h: int, w: int) -> "Geometry":
        return cls(0, 0, h, w, h, w)

    @property
    def is_identity(self) -> bool:
        return (self.top, self.left, self.height, self.width) == (0, 0, self.out_h, self.out_w)

    def source_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Source row and column for every output pixel."""
        rows = self.top + (np.arange(self.out_h) * self.height) // self.out_h
        cols = self.left + (np.arange(self.out_w) * self.width) // self.out_w
        return rows, cols

    def apply_image(self, image) -> np.ndarray:
        """Crop-and-resize a channel-last image ``(..., H, W, ch)``."""
        rows, cols = self.source_index()
        return np.asarray(image)[..., rows[:, None], cols[None, :], :]

    def apply_map(self, arr) -> np.ndarray:
        """Crop-and-resize a per-pixel map ``(..., H, W)``."""
        rows, cols = self.source_index()
        return np.asarray(arr)[..., rows[:, None], cols[None, :]]


def sample_geometry(h: int, w: int, cfg: AugmentationConfig, rng: np.random.Generator) -> Geometry:
    if not cfg.random_crop:
        return Geometry.full(h, w)
    ch, cw = cfg.crop_size
    if ch > h or cw > w:
        raise ValueError(f"crop {cfg.crop_size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return Geometry(top, left, ch, cw, h, w)


def hue_rotation_matrix(turns: float) -> np.ndarray:
    """RGB rotation by ``turns`` (1.0 = full circle) about the grey axis."""
    theta = 2.0 * np.pi * turns
    k = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def rotate_hue(image, turns: float) -> np.ndarray:
    rot = hue_rotation_matrix(turns).astype(np.asarray(image).dtype)
    return np.clip(np.asarray(image) @ rot.T, 0.0, 1.0)


def color_jitter(image, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(-cfg.brightness, cfg.brightness)
    c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    dh = rng.uniform(-cfg.hue, cfg.hue)
    out = np.clip((image - 0.5) * c + 0.5 + b, 0.0, 1.0)
    if dh:
        out = rotate_hue(out, dh)
    return out


def augment(image, cfg: AugmentationConfig, rng: np.random.Generator, geometry: Geometry | None = None):
    """Augment one ``H x W x 3`` image; returns ``(image, geometry)``.

    Pass the geometry of a paired view to reuse its crop; photometric draws
    are always fresh.  Draw order: crop, jitter, noise.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if geometry is None:
        geometry = sample_geometry(h, w, cfg, rng)
    out = image if geometry.is_identity else geometry.apply_image(image)
    if cfg.color_jitter:
        out = color_jitter(out, cfg, rng)
    if cfg.gaussian_noise and cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False), geometry
