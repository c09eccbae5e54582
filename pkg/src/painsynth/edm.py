"""Preconditioned denoiser wrapper, training objective, sigma schedules, and the
deterministic multistep ODE sampler.

The wrapper expresses the denoiser as
    D(z, sigma) = c_skip(sigma) z + c_out(sigma) F(c_in(sigma) z, c_noise(sigma), C)
so the backbone F always sees unit-variance inputs and a bounded target.
Per-step sigma vectors are supported throughout: a window may mix noise levels
across its stacked steps, which is what the rollout scheduler relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import LatentSequence, Rng, unstack_frames, StackedSequence
from .errors import ConfigError
from .net import BatchedConditions


@dataclass(frozen=True)
class EdmParams:
    """Preconditioning and noise-distribution constants (reference defaults)."""

    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.sigma_data <= 0:
            raise ConfigError(f"sigma_data must be positive, got {self.sigma_data}")


def precondition_coeffs(sigma, params: EdmParams):
    """(c_skip, c_out, c_in, c_noise) for scalar or array sigma >= 0.

    c_noise(0) is clamped to c_noise(sigma_min); it is only ever consumed by
    context steps whose c_out is 0, so the network output there is irrelevant.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise ConfigError("sigma must be >= 0")
    sd2 = params.sigma_data**2
    denom = sigma**2 + sd2
    c_skip = sd2 / denom
    c_out = sigma * params.sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    c_noise = np.log(np.where(sigma > 0, sigma, params.sigma_min)) / 4.0
    return c_skip, c_out, c_in, c_noise


@dataclass(frozen=True)
class SigmaGrid:
    """Discrete noise levels sigma_0 = sigma_max > ... > sigma_{K-1} = sigma_min > sigma_K = 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.sigmas, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ConfigError("sigma grid needs at least [sigma_max, 0]")
        if arr[-1] != 0.0:
            raise ConfigError("sigma grid must terminate at exactly 0")
        if not (np.diff(arr) < 0).all():
            raise ConfigError("sigma grid must be strictly decreasing")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "sigmas", arr)

    @property
    def steps(self) -> int:
        """K: number of sampler transitions; the grid holds K+1 levels."""
        return len(self.sigmas) - 1

    def sigma_for_noise_index(self, k):
        """Map scheduling indices (0 = clean ... K = max noise) to sigma values."""
        k = np.asarray(k)
        if (k < 0).any() or (k > self.steps).any():
            raise ConfigError(f"noise index outside [0, {self.steps}]")
        return self.sigmas[self.steps - k]


def karras_grid(num_steps: int, params: EdmParams) -> SigmaGrid:
    """rho-warped sigma schedule from sigma_max down to sigma_min, then 0."""
    if num_steps < 1:
        raise ConfigError(f"step count must be >= 1, got {num_steps}")
    if num_steps == 1:
        return SigmaGrid(np.array([params.sigma_max, 0.0]))
    inv_rho = 1.0 / params.rho
    i = np.arange(num_steps, dtype=np.float64)
    sig = (
        params.sigma_max**inv_rho
        + i / (num_steps - 1) * (params.sigma_min**inv_rho - params.sigma_max**inv_rho)
    ) ** params.rho
    return SigmaGrid(np.append(sig, 0.0))


def _sigma_grid_bt(sigma, batch: int, steps: int) -> np.ndarray:
    """Broadcast scalar / (T',) / (B, T') sigma to a (B, T') float64 array."""
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full((batch, steps), float(arr))
    elif arr.ndim == 1:
        if arr.shape[0] != steps:
            raise ConfigError(f"sigma vector length {arr.shape[0]} != {steps} steps")
        arr = np.broadcast_to(arr, (batch, steps))
    elif arr.shape != (batch, steps):
        raise ConfigError(f"sigma shape {arr.shape} incompatible with ({batch}, {steps})")
    return np.ascontiguousarray(arr, dtype=np.float64)


class Denoiser:
    """Preconditioned denoiser D around a backbone network.

    The backbone is any callable (z_scaled, noise_labels, cond, t0) -> tensor,
    which keeps stubs trivial in tests.
    """

    def __init__(self, net, params: EdmParams = EdmParams()):
        self.net = net
        self.params = params

    def __call__(self, z: torch.Tensor, sigma, cond: BatchedConditions, t0: int = 0) -> torch.Tensor:
        b, t = z.shape[0], z.shape[1]
        sig = _sigma_grid_bt(sigma, b, t)
        c_skip, c_out, c_in, c_noise = precondition_coeffs(sig, self.params)
        to = lambda a: torch.tensor(a, dtype=z.dtype)[:, :, None, None]
        labels = torch.tensor(c_noise, dtype=z.dtype)
        f_out = self.net(to(c_in) * z, labels, cond, t0)
        return to(c_skip) * z + to(c_out) * f_out


def training_loss(
    net,
    params: EdmParams,
    y: torch.Tensor,
    cond: BatchedConditions,
    rng: Rng,
    sigma_per_step: np.ndarray | None = None,
    t0: int = 0,
    return_details: bool = False,
):
    """Denoising score-matching loss with an independent noise level per stacked step.

    By default ln(sigma) ~ Normal(p_mean, p_std^2) is drawn per (batch, step).
    An explicit sigma_per_step may be supplied instead (e.g. discrete grid
    levels); steps with sigma == 0 carry no loss term since their target is
    the identity.
    """
    b, t = y.shape[0], y.shape[1]
    if sigma_per_step is None:
        sigma = np.exp(rng.normal((b, t), params.p_mean, params.p_std))
    else:
        sigma = _sigma_grid_bt(sigma_per_step, b, t)
    noise = rng.normal(y.shape) * sigma[:, :, None, None]

    c_skip, c_out, c_in, c_noise = precondition_coeffs(sigma, params)
    active = sigma > 0
    c_out_safe = np.where(active, c_out, 1.0)

    to = lambda a: torch.tensor(a, dtype=y.dtype)[:, :, None, None]
    noisy = y + torch.tensor(noise, dtype=y.dtype)
    y_pred = net(to(c_in) * noisy, torch.tensor(c_noise, dtype=y.dtype), cond, t0)
    y_target = (y - to(c_skip) * noisy) / to(c_out_safe)

    sq = (y_pred - y_target) ** 2
    mask = torch.tensor(active, dtype=y.dtype)[:, :, None, None].expand_as(sq)
    loss = (sq * mask).sum() / mask.sum()
    if return_details:
        return loss, {"sigma": sigma, "noisy": noisy, "y_pred": y_pred, "y_target": y_target}
    return loss


@dataclass
class SamplerHistory:
    """Carries the previous denoiser output for the multistep correction."""

    denoised: torch.Tensor | None = None
    sigma: np.ndarray | None = None


def sampler_step(
    z: torch.Tensor,
    sigma,
    sigma_next,
    denoise_fn,
    history: SamplerHistory | None = None,
) -> tuple[torch.Tensor, SamplerHistory]:
    """One deterministic multistep ODE update from sigma down to sigma_next.

    The first transition of a step uses the one-step rule in denoised-output
    form, z' = (s_next/s) z + (1 - s_next/s) D(z, s); afterwards the two-step
    linear multistep correction in log-sigma time reuses the previous D
    evaluation.  Per-step sigma vectors are allowed and positions where
    sigma_next == sigma are left untouched (parked columns in a rollout).
    """
    b, t = z.shape[0], z.shape[1]
    sig = _sigma_grid_bt(sigma, b, t)
    sig_next = _sigma_grid_bt(sigma_next, b, t)
    if (sig_next > sig).any():
        raise ConfigError("sampler requires sigma_next <= sigma everywhere")
    if not (sig_next < sig).any():
        raise ConfigError("sampler step requires sigma_next < sigma somewhere (non-decreasing rejected)")

    def to(a):
        return torch.tensor(a, dtype=z.dtype)[:, :, None, None]

    moving = sig_next < sig
    d_cur = denoise_fn(z, sig)

    ratio = np.where(moving, sig_next / np.where(moving, sig, 1.0), 1.0)

    d_hat = d_cur
    if history is not None and history.denoised is not None:
        prev_sig = _sigma_grid_bt(history.sigma, b, t)
        # the multistep correction needs a previous D at a strictly larger
        # sigma and a non-terminal target; everything else falls back to the
        # one-step rule (coef 0 selects d_cur)
        use2m = moving & (prev_sig > sig) & (sig_next > 0)
        if use2m.any():
            safe_sig = np.where(use2m, sig, 1.0)
            safe_next = np.where(use2m, sig_next, 1.0)
            safe_prev = np.where(use2m, prev_sig, np.e)
            h = np.log(safe_sig / safe_next)
            h_last = np.log(safe_prev / safe_sig)
            r = h_last / np.where(use2m, h, 1.0)
            coef = np.where(use2m, 1.0 / (2.0 * r), 0.0)
            d_hat = (1 + to(coef)) * d_cur - to(coef) * history.denoised

    z_next = to(ratio) * z + (1 - to(ratio)) * d_hat
    # terminal transition: the exact ODE limit lands on the denoiser output
    final = moving & (sig_next == 0)
    if final.any():
        z_next = torch.where(to(final.astype(np.float64)) > 0, d_cur, z_next)
    return z_next, SamplerHistory(denoised=d_cur, sigma=sig)


def sample_full_sequence(
    denoiser,
    bundle,
    total_frames: int,
    grid: SigmaGrid,
    stack: int,
    latent_dim: int,
    rng: Rng,
    guidance=None,
    frame_rate: float = 25.0,
    dtype=torch.float32,
) -> LatentSequence:
    """Sample one whole window with a uniform noise level per step (full-sequence path)."""
    from .guidance import make_guided_denoise_fn

    if total_frames % stack != 0:
        raise ConfigError(f"total_frames {total_frames} not divisible by stack {stack}")
    steps = total_frames // stack
    cond = BatchedConditions.from_bundles(bundle, dtype=dtype)

    fn = make_guided_denoise_fn(denoiser, cond, guidance)
    z = torch.tensor(rng.normal((1, steps, stack, latent_dim)) * grid.sigmas[0], dtype=dtype)
    history = SamplerHistory()
    with torch.no_grad():
        for i in range(grid.steps):
            z, history = sampler_step(z, grid.sigmas[i], grid.sigmas[i + 1], fn, history)
    stacked = StackedSequence(z[0].detach().cpu().numpy(), stack=stack, frame_rate=frame_rate)
    return unstack_frames(stacked)
