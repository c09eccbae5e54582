"""Multi-condition classifier-free guidance and training-time condition dropout.

Guided output combines the fully conditioned denoiser pass with one
leave-one-out pass per condition channel carrying positive weight:

    z_hat = (1 + sum_c w_c) D(z, sigma, C) - sum_c w_c D(z, sigma, C with c nulled)

Channels are indexed (0 stimuli, 1 expressiveness, 2 emotion) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .core import ConditionBundle, Rng
from .errors import ConfigError
from .net import BatchedConditions

CHANNEL_NAMES = ("stimuli", "expressiveness", "emotion")


@dataclass(frozen=True)
class GuidanceWeights:
    """Per-condition guidance strengths; zero disables that channel's extra pass.

    Defaults follow the strongest observed ordering: stimuli first, then
    expressiveness, then emotion.
    """

    stimuli: float = 1.0
    expressiveness: float = 0.5
    emotion: float = 0.25

    def __post_init__(self):
        for name in CHANNEL_NAMES:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"guidance weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple:
        return (self.stimuli, self.expressiveness, self.emotion)

    @property
    def active(self) -> bool:
        return any(v > 0 for v in self.as_tuple())


def condition_dropout(bundle: ConditionBundle, p: float, rng: Rng) -> ConditionBundle:
    """Independently null-mask each condition channel with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1], got {p}")
    drops = rng.uniform((3,)) < p
    mask = tuple(bool(m or d) for m, d in zip(bundle.null_mask, drops))
    return replace(bundle, null_mask=mask)


def guided_denoise(
    denoise,
    z: torch.Tensor,
    sigma,
    cond: BatchedConditions,
    weights: GuidanceWeights,
    t0: int = 0,
) -> torch.Tensor:
    """Classifier-free-guided denoiser output; costs 1 + |{c: w_c > 0}| passes."""
    full = denoise(z, sigma, cond, t0)
    if not weights.active:
        return full
    total = sum(weights.as_tuple())
    out = (1.0 + total) * full
    for channel, w in enumerate(weights.as_tuple()):
        if w > 0:
            out = out - w * denoise(z, sigma, cond.null_channel(channel), t0)
    return out


def make_guided_denoise_fn(denoiser, cond: BatchedConditions, weights: GuidanceWeights | None, t0: int = 0):
    """Close a denoiser over fixed conditions (and optional guidance) for the sampler."""
    if weights is None or not weights.active:
        return lambda z, sigma: denoiser(z, sigma, cond, t0)
    return lambda z, sigma: guided_denoise(denoiser, z, sigma, cond, weights, t0)
