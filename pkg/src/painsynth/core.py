"""Shared sequence types, frame stacking, sinusoidal embeddings, and seeded RNG streams.

Everything downstream (network, sampler, data generation, metrics) builds on the
value types defined here.  All types are immutable after construction and safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

# Sentinel marking trimmed / absent stimulus frames inside a ConditionBundle.
# The condition encoder swaps these positions for its learned null embedding.
NULL_STIMULUS = float("nan")


def is_null_stimulus(values) -> np.ndarray:
    """Boolean mask of stimulus entries that carry the null sentinel."""
    return np.isnan(np.asarray(values, dtype=np.float64))


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LatentSequence:
    """A (T, d) sequence of per-frame expression latents at a fixed frame rate."""

    data: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DataError(f"latent sequence must be 2-D (T, d), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"latent sequence needs T >= 1 and d >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("latent sequence contains non-finite entries")
        if not self.frame_rate > 0:
            raise DataError(f"frame_rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def window(self, start: int, length: int) -> "LatentSequence":
        if start < 0 or start + length > self.length:
            raise DataError(f"window [{start}, {start + length}) outside sequence of length {self.length}")
        return LatentSequence(self.data[start : start + length], self.frame_rate)


@dataclass(frozen=True)
class StackedSequence:
    """A latent sequence reshaped to (T', s, d): s consecutive frames per stacked step."""

    data: np.ndarray
    stack: int
    frame_rate: float = 25.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"stacked sequence must be 3-D (T', s, d), got shape {arr.shape}")
        if self.stack < 1 or arr.shape[1] != self.stack:
            raise DataError(f"stack={self.stack} inconsistent with shape {arr.shape}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ConditionBundle:
    """Per-sequence conditioning: stimulus track plus two subject scalars.

    ``stimuli`` may contain NULL_STIMULUS (NaN) entries for trimmed frames.
    ``null_mask`` flags whole channels (stimuli, expressiveness, emotion) as
    absent; a masked channel is replaced by its learned null embedding
    everywhere downstream, regardless of the values stored here.
    """

    stimuli: np.ndarray
    expressiveness: float
    emotion: float
    null_mask: tuple = (False, False, False)

    def __post_init__(self):
        arr = np.asarray(self.stimuli, dtype=np.float64)
        if arr.ndim != 1:
            raise DataError(f"stimuli must be 1-D, got shape {arr.shape}")
        finite = arr[~np.isnan(arr)]
        if finite.size and (not np.isfinite(finite).all() or (finite < 0).any()):
            raise DataError("stimuli must be >= 0 (or the NaN null sentinel)")
        if len(self.null_mask) != 3:
            raise DataError("null_mask must have exactly 3 entries")
        object.__setattr__(self, "stimuli", _freeze(arr))
        object.__setattr__(self, "null_mask", tuple(bool(b) for b in self.null_mask))

    @property
    def length(self) -> int:
        return self.stimuli.shape[0]

    def window(self, start: int, length: int) -> "ConditionBundle":
        if start < 0 or start + length > self.length:
            raise DataError(f"condition window [{start}, {start + length}) outside track of length {self.length}")
        return replace(self, stimuli=self.stimuli[start : start + length])

    def with_null(self, channel: int) -> "ConditionBundle":
        mask = list(self.null_mask)
        mask[channel] = True
        return replace(self, null_mask=tuple(mask))


class Rng:
    """Deterministic random stream keyed by (seed, stream).

    Backed by the counter-based Philox generator, so streams with distinct ids
    are statistically independent and any (seed, stream) pair reproduces the
    same draw sequence on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, stream: int) -> "Rng":
        """Fresh independent stream under the same seed."""
        return Rng(self.seed, stream)

    def normal(self, shape=(), loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def stack_frames(x: LatentSequence, s: int) -> StackedSequence:
    """Pack each run of s consecutive frames into the channel axis.

    output[t', j] == x[t' * s + j]; requires s to divide T exactly.
    """
    if s < 1:
        raise ConfigError(f"frame stack must be >= 1, got {s}")
    if x.length % s != 0:
        raise ConfigError(
            f"frame stack {s} does not divide sequence length {x.length} (remainder {x.length % s})"
        )
    data = x.data.reshape(x.length // s, s, x.dim)
    return StackedSequence(data, stack=s, frame_rate=x.frame_rate)


def unstack_frames(z: StackedSequence) -> LatentSequence:
    """Exact inverse of stack_frames."""
    data = z.data.reshape(z.steps * z.stack, z.dim)
    return LatentSequence(data, frame_rate=z.frame_rate)


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: [sin(t w_k) ... cos(t w_k)] with w_k = 10000^(-2k/dim).

    Accepts a scalar or an array of positions; the embedding axis is appended
    last.  All entries lie in [-1, 1].
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / dim)
    phase = t[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)
