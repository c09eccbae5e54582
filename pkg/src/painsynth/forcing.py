"""Per-step noise assignment, scheduling-matrix construction, and the
arbitrary-length rollout engine.

A rollout denoises a sliding window of W' stacked steps whose first W' - h'
columns are clean context (previously generated steps, or a neutral seed) and
whose last h' columns are fresh noise.  The scheduling matrix prescribes, for
each denoising sweep, the noise-level index of every column; once the last
sweep hits zero everywhere, the h' new steps are committed and the window
slides forward by h'.
"""

from __future__ import annotations

import math
import queue as queue_mod
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import ConditionBundle, LatentSequence, Rng
from .edm import SamplerHistory, SigmaGrid, sampler_step
from .errors import ConfigError, DataError
from .net import BatchedConditions


@dataclass(frozen=True)
class SchedulingMatrix:
    """S x W' grid of noise indices (0 = clean ... levels = max noise).

    Column j of the new block starts at the top level and descends one level
    per sweep after a delay of ceil(j * uncertainty) sweeps, so later columns
    stay noisy longer; context columns are zero in every row.
    """

    entries: np.ndarray
    context: int
    levels: int

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.int64)
        if arr.ndim != 2:
            raise ConfigError(f"scheduling matrix must be 2-D, got shape {arr.shape}")
        if not (0 < self.context < arr.shape[1]):
            raise ConfigError(f"context columns must satisfy 0 < context < width, got {self.context}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)
        self.validate()

    @property
    def sweeps(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]

    @property
    def horizon(self) -> int:
        """Stacked steps committed per slide."""
        return self.width - self.context

    def validate(self) -> None:
        arr = self.entries
        if arr.min() < 0 or arr.max() > self.levels:
            raise ConfigError("noise indices outside [0, levels]")
        if (np.diff(arr, axis=0) > 0).any():
            raise ConfigError("columns must be non-increasing over sweeps")
        if arr[-1].any():
            raise ConfigError("terminal sweep must be all clean")
        if arr[:, : self.context].any():
            raise ConfigError("context columns must be clean in every sweep")
        if (np.diff(arr, axis=1) < 0).any():
            raise ConfigError("rows must be non-decreasing left to right")


def build_scheduling_matrix(width: int, horizon: int, levels: int, uncertainty: float) -> SchedulingMatrix:
    """Staircase schedule for one window.

    width: W' stacked steps; horizon: h' new columns (0 < h' < W'); levels: K
    noise levels above clean; uncertainty >= 0 sets the per-column start delay
    ceil(j * uncertainty) in sweeps.  Larger uncertainty keeps later columns
    noisy longer and yields more sweeps; 0 collapses to full-sequence
    behavior, every new column sharing each sweep's level.
    """
    if not 0 < horizon < width:
        raise ConfigError(f"need 0 < horizon < width (context >= 1), got horizon={horizon}, width={width}")
    if levels < 1:
        raise ConfigError(f"need at least one noise level, got {levels}")
    if uncertainty < 0 or not math.isfinite(uncertainty):
        raise ConfigError(f"uncertainty must be finite and >= 0, got {uncertainty}")
    context = width - horizon
    delays = [math.ceil(j * uncertainty) for j in range(horizon)]
    sweeps = levels + delays[-1] + 1
    entries = np.zeros((sweeps, width), dtype=np.int64)
    for row in range(sweeps):
        for j, delay in enumerate(delays):
            entries[row, context + j] = min(levels, max(0, levels - (row - delay)))
    return SchedulingMatrix(entries=entries, context=context, levels=levels)


def assign_training_noise(steps: int, levels: int, rng: Rng) -> np.ndarray:
    """Independent uniform noise-level index in {0, ..., levels} per stacked step."""
    if levels < 1:
        raise ConfigError(f"need at least one noise level, got {levels}")
    if steps < 1:
        raise ConfigError(f"need at least one step, got {steps}")
    return np.asarray(rng.integers(0, levels + 1, (steps,)), dtype=np.int64)


def rollout_latency(matrix: SchedulingMatrix, frame_rate: float, stack: int = 1) -> float:
    """Reaction delay in seconds: committed frames per slide over the frame rate."""
    if frame_rate <= 0:
        raise ConfigError(f"frame_rate must be positive, got {frame_rate}")
    return matrix.horizon * stack / frame_rate


@dataclass(frozen=True)
class ConditionStream:
    """Streaming conditions: an iterator of stimulus scalars plus subject scalars."""

    stimuli: object  # iterable of floats
    expressiveness: float
    emotion: float
    null_mask: tuple = (False, False, False)


def queue_stimuli(q: "queue_mod.Queue", close=None):
    """Drain a (bounded) queue as a stimulus iterator: blocks on empty, stops on the close sentinel."""
    while True:
        item = q.get()
        if item is close or item is None:
            return
        yield float(item)


@dataclass
class RolloutState:
    """Mutable bookkeeping for one rollout."""

    history: list = field(default_factory=list)  # committed (h', s, d) blocks
    context_steps: int = 0
    pending_stimuli: list = field(default_factory=list)  # consumed stimulus frames

    @property
    def committed_steps(self) -> int:
        return sum(b.shape[0] for b in self.history)


class RolloutEngine:
    """Drives window-by-window generation for an arbitrary total length.

    `denoise` is any callable (z, sigma, cond, t0) -> tensor.  The committed
    history is never rewritten: context columns sit at noise level zero in
    every sweep and later windows only read them.
    """

    def __init__(
        self,
        denoise,
        grid: SigmaGrid,
        matrix: SchedulingMatrix,
        conditions,
        total_frames: int,
        stack: int,
        latent_dim: int,
        rng: Rng,
        guidance=None,
        seed_context: np.ndarray | None = None,
        frame_rate: float = 25.0,
        dtype=torch.float32,
    ):
        if matrix.levels != grid.steps:
            raise ConfigError(f"matrix indexes {matrix.levels} levels but grid has {grid.steps}")
        window_frames = matrix.width * stack
        if total_frames < window_frames:
            raise ConfigError(f"total_frames {total_frames} shorter than the window ({window_frames} frames)")
        self.denoise = denoise
        self.grid = grid
        self.matrix = matrix
        self.total_frames = total_frames
        self.stack = stack
        self.latent_dim = latent_dim
        self.rng = rng
        self.guidance = guidance
        self.frame_rate = frame_rate
        self.dtype = dtype
        self.state = RolloutState(context_steps=matrix.context)

        if isinstance(conditions, ConditionBundle):
            if conditions.length < total_frames:
                raise DataError(
                    f"stimuli underrun: frame {conditions.length} missing (need {total_frames})"
                )
            self._stim_iter = iter(np.asarray(conditions.stimuli[:total_frames], dtype=np.float64))
            self._expr = conditions.expressiveness
            self._emo = conditions.emotion
            self._null = conditions.null_mask
        elif isinstance(conditions, ConditionStream):
            self._stim_iter = iter(conditions.stimuli)
            self._expr = conditions.expressiveness
            self._emo = conditions.emotion
            self._null = conditions.null_mask
        else:
            raise ConfigError(f"unsupported conditions object: {type(conditions)!r}")

        if seed_context is None:
            seed_context = np.zeros((matrix.context, stack, latent_dim))
        seed_context = np.asarray(seed_context, dtype=np.float64)
        if seed_context.shape != (matrix.context, stack, latent_dim):
            raise ConfigError(
                f"seed context shape {seed_context.shape} != {(matrix.context, stack, latent_dim)}"
            )
        self._seed = seed_context

    def latency_seconds(self) -> float:
        return rollout_latency(self.matrix, self.frame_rate, self.stack)

    def _stimulus_frame(self, index: int) -> float:
        """Stimulus for an absolute frame index; pre-history is baseline zero and
        frames past the requested length hold the last real value (window overhang)."""
        if index < 0:
            return 0.0
        buf = self.state.pending_stimuli
        while len(buf) <= index and len(buf) < self.total_frames:
            try:
                buf.append(float(next(self._stim_iter)))
            except StopIteration:
                raise DataError(f"stimuli underrun: frame {len(buf)} missing (need {self.total_frames})")
        return buf[min(index, self.total_frames - 1)]

    def _window_bundle(self, start_step: int) -> ConditionBundle:
        frames = [
            self._stimulus_frame(start_step * self.stack + i)
            for i in range(self.matrix.width * self.stack)
        ]
        track = np.asarray(frames, dtype=np.float64)
        # trimmed sentinels never appear here; pre-history is zero by construction
        return ConditionBundle(track, self._expr, self._emo, self._null)

    def _context_block(self) -> np.ndarray:
        # assemble only the trailing blocks that cover the context, so long
        # streaming rollouts stay O(context) per window
        ctx = self.matrix.context
        tail, have = [], 0
        for block in reversed([self._seed] + self.state.history):
            tail.append(block)
            have += block.shape[0]
            if have >= ctx:
                break
        return np.concatenate(tail[::-1], axis=0)[-ctx:]

    def blocks(self):
        """Yield committed (frames, d) arrays until total_frames are out."""
        from .guidance import make_guided_denoise_fn

        needed_steps = math.ceil(self.total_frames / self.stack)
        entries = self.matrix.entries
        ctx, hor = self.matrix.context, self.matrix.horizon
        emitted_frames = 0
        with torch.no_grad():
            while self.state.committed_steps < needed_steps:
                gen_steps = self.state.committed_steps
                start_step = gen_steps - ctx  # absolute index of the window's first step
                bundle = self._window_bundle(start_step)
                cond = BatchedConditions.from_bundles(bundle, dtype=self.dtype)
                # temporal positions are window-local: every window is its own
                # attention context, exactly like a training window
                fn = make_guided_denoise_fn(self.denoise, cond, self.guidance, 0)

                noise = self.rng.normal((hor, self.stack, self.latent_dim)) * self.grid.sigmas[0]
                window = np.concatenate([self._context_block(), noise], axis=0)
                z = torch.tensor(window, dtype=self.dtype)[None]
                history = SamplerHistory()
                for row in range(self.matrix.sweeps - 1):
                    sig = self.grid.sigma_for_noise_index(entries[row])
                    sig_next = self.grid.sigma_for_noise_index(entries[row + 1])
                    z, history = sampler_step(z, sig, sig_next, fn, history)

                block = z[0, ctx:].cpu().numpy().astype(np.float64)
                self.state.history.append(block)
                flat = block.reshape(hor * self.stack, self.latent_dim)
                take = min(flat.shape[0], self.total_frames - emitted_frames)
                emitted_frames += take
                yield flat[:take]

    def run(self) -> LatentSequence:
        frames = np.concatenate(list(self.blocks()), axis=0)
        return LatentSequence(frames, frame_rate=self.frame_rate)


def rollout(
    denoise,
    grid: SigmaGrid,
    matrix: SchedulingMatrix,
    conditions,
    total_frames: int,
    stack: int,
    latent_dim: int,
    rng: Rng,
    guidance=None,
    seed_context: np.ndarray | None = None,
    frame_rate: float = 25.0,
    dtype=torch.float32,
) -> LatentSequence:
    """Generate exactly total_frames latent frames by sliding-window denoising."""
    engine = RolloutEngine(
        denoise,
        grid,
        matrix,
        conditions,
        total_frames,
        stack,
        latent_dim,
        rng,
        guidance=guidance,
        seed_context=seed_context,
        frame_rate=frame_rate,
        dtype=dtype,
    )
    return engine.run()
