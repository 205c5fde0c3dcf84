"""Stochastic-ensemble predictive entropy and the time-dependent confidence mask."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .segcore import _channel_sum, normalize

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class UncertaintyConfig:
    num_passes: int = 8
    noise_sigma: float = 0.05

    def __post_init__(self):
        if int(self.num_passes) != self.num_passes or self.num_passes < 1:
            raise ValueError(f"num_passes must be an integer >= 1, got {self.num_passes}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class ThresholdSchedule:
    thresh_alpha: float = 0.75
    thresh_beta: float = -5.0
    t_max: int = 2000
    z_sup_mode: str = "batch_max"

    def __post_init__(self):
        if not 0.0 < self.thresh_alpha < 1.0:
            raise ValueError(f"thresh_alpha must lie in (0, 1), got {self.thresh_alpha}")
        if not self.thresh_beta < 0.0:
            raise ValueError(f"thresh_beta must be negative, got {self.thresh_beta}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.z_sup_mode not in ("batch_max", "theoretical"):
            raise ValueError(f"unknown z_sup_mode {self.z_sup_mode!r}")


def average_prediction(preds: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Element-wise mean of N probability maps (a list, or an array stacked on axis 0)."""
    if isinstance(preds, np.ndarray):
        stack = preds
    else:
        preds = list(preds)
        if not preds:
            raise ValueError("average_prediction needs at least one map")
        shapes = {np.shape(p) for p in preds}
        if len(shapes) != 1:
            raise ValueError(f"probability maps differ in shape: {sorted(shapes)}")
        stack = np.stack(preds)
    if stack.shape[0] == 0:
        raise ValueError("average_prediction needs at least one map")
    return stack.mean(axis=0)


def predictive_entropy(p_hat) -> np.ndarray:
    """Per-pixel entropy in nats, with 0 * ln 0 taken as 0."""
    p = np.asarray(p_hat)
    h = -_channel_sum(p * np.log(np.maximum(p, LOG_FLOOR)))
    return np.maximum(h, 0.0)


def z_sup(entropy, mode: str = "batch_max", num_classes: int | None = None) -> float:
    entropy = np.asarray(entropy)
    if entropy.size == 0:
        raise ValueError("entropy map is empty")
    if mode == "batch_max":
        return float(entropy.max())
    if mode == "theoretical":
        if num_classes is None:
            raise ValueError("theoretical z_sup needs num_classes")
        return math.log(num_classes)
    raise ValueError(f"unknown z_sup mode {mode!r}")


def dynamic_threshold(t: int, sched: ThresholdSchedule, zsup: float) -> float:
    """Entropy cutoff that rises from ``alpha`` toward ``alpha + (1 - alpha) * zsup``."""
    if t < 0 or t > sched.t_max:
        raise ValueError(f"step {t} outside [0, {sched.t_max}]")
    a = sched.thresh_alpha
    ramp = math.exp(sched.thresh_beta * (1.0 - t / sched.t_max) ** 2)
    return a + (1.0 - a) * ramp * zsup


def uncertainty_mask(entropy, R: float) -> np.ndarray:
    return (np.asarray(entropy) < R).astype(np.uint8)


def _pass_noise(base: int, index: int, shape, dtype) -> np.ndarray:
    # one independently seeded stream per pass index, so passes are order-independent
    seed = int(np.random.SeedSequence([base, index]).generate_state(1, np.uint64)[0])
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)


def stochastic_ensemble(
    model: Callable[[np.ndarray], np.ndarray],
    image,
    cfg: UncertaintyConfig,
    rng: np.random.Generator,
    normalized: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``model`` on N noisy copies of ``image`` and softmax each output.

    ``image`` may carry leading batch axes; ``model`` maps images to logits and
    is called exactly ``cfg.num_passes`` times.  Pass ``i`` draws its noise from
    a generator addressed by ``(base, i)`` so passes are order-independent.
    With ``normalized=True`` the model already returns probabilities.
    Returns ``(mean, members)`` with members stacked on axis 0.
    """
    image = np.ascontiguousarray(image)
    base = int(rng.integers(0, 2**63 - 1))
    img_t = torch.from_numpy(image)
    members = []
    for i in range(cfg.num_passes):
        if cfg.noise_sigma > 0:
            noise = _pass_noise(base, i, image.shape, img_t.dtype)
            noisy = noise.mul_(cfg.noise_sigma).add_(img_t).clamp_(0.0, 1.0).numpy()
        else:
            noisy = image
        out = model(noisy)
        members.append(np.asarray(out) if normalized else normalize(out))
    members = np.stack(members)
    return average_prediction(members), members
