"""Stimulus-conditioned latent diffusion for facial pain-expression sequences."""

from .core import (
    ConditionBundle,
    LatentSequence,
    Rng,
    StackedSequence,
    sinusoidal_embed,
    stack_frames,
    unstack_frames,
)
from .edm import Denoiser, EdmParams, SigmaGrid, karras_grid, precondition_coeffs
from .errors import ConfigError, DataError, NumericError, PainsynthError
from .forcing import SchedulingMatrix, build_scheduling_matrix, rollout, rollout_latency
from .guidance import GuidanceWeights, condition_dropout, guided_denoise
from .net import NetConfig, TemporalUnet

__version__ = "0.1.0"
