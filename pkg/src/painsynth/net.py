"""Temporal latent U-Net.

Maps stacked noisy latents (B, T', s, d), per-step noise labels, conditioning
signals, and temporal positions to a prediction tensor of the same shape.
Spatial layers treat each stacked step as an independent batch item and run
1-D convolutions / attention over the d latent positions; temporal layers
attend across the T' steps.  Attention is non-causal inside a window; ordering
across windows is the rollout scheduler's job, not the network's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import ConditionBundle, sinusoidal_embed
from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters. Defaults are desk scale, not a claim about any reference model."""

    latent_dim: int = 8
    stack: int = 4
    widths: tuple = (32,)
    heads: int = 4
    cond_dim: int = 32
    emb_dim: int = 32

    def __post_init__(self):
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        down_factor = 2 ** (len(self.widths) - 1)
        if self.latent_dim % down_factor != 0 or self.latent_dim // down_factor < 1:
            raise ConfigError(
                f"latent_dim {self.latent_dim} not divisible into {len(self.widths)} resolution levels"
            )
        for w in self.widths:
            if w % self.heads != 0:
                raise ConfigError(f"width {w} not divisible by {self.heads} heads")
        if self.emb_dim % 2 or self.cond_dim < 1:
            raise ConfigError("emb_dim must be even and cond_dim positive")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "stack": self.stack,
            "widths": list(self.widths),
            "heads": self.heads,
            "cond_dim": self.cond_dim,
            "emb_dim": self.emb_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return NetConfig(**d)


@dataclass
class BatchedConditions:
    """Conditioning tensors for a batch of windows.

    stimuli may contain NaN entries (the per-frame null sentinel); null_mask
    rows flag whole channels (stimuli, expressiveness, emotion) as absent.
    """

    stimuli: torch.Tensor        # (B, T)
    expressiveness: torch.Tensor  # (B,)
    emotion: torch.Tensor         # (B,)
    null_mask: torch.Tensor       # (B, 3) bool

    @staticmethod
    def from_bundles(bundles, dtype=torch.float32) -> "BatchedConditions":
        if isinstance(bundles, ConditionBundle):
            bundles = [bundles]
        stim = torch.tensor(np.stack([b.stimuli for b in bundles]), dtype=dtype)
        expr = torch.tensor([b.expressiveness for b in bundles], dtype=dtype)
        emo = torch.tensor([b.emotion for b in bundles], dtype=dtype)
        mask = torch.tensor([list(b.null_mask) for b in bundles], dtype=torch.bool)
        return BatchedConditions(stim, expr, emo, mask)

    def null_channel(self, channel: int) -> "BatchedConditions":
        mask = self.null_mask.clone()
        mask[:, channel] = True
        return BatchedConditions(self.stimuli, self.expressiveness, self.emotion, mask)

    @property
    def batch(self) -> int:
        return self.stimuli.shape[0]


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head softmax attention over token axis 1. q: (N, Lq, C), k/v: (N, Lk, C)."""
    n, lq, c = q.shape
    lk = k.shape[1]
    dh = c // heads
    q = q.reshape(n, lq, heads, dh).transpose(1, 2)
    k = k.reshape(n, lk, heads, dh).transpose(1, 2)
    v = v.reshape(n, lk, heads, dh).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = attn @ v
    return out.transpose(1, 2).reshape(n, lq, c)


class ConditionEncoder(nn.Module):
    """Lightweight MLP over each stacked step's s stimulus scalars plus the two subject scalars.

    Null-masked channels (and NaN stimulus frames) are swapped for learned
    null embeddings before the MLP, so a nulled channel contributes nothing
    from the bundle's actual values.
    """

    def __init__(self, stack: int, cond_dim: int):
        super().__init__()
        self.stack = stack
        self.null_stimulus = nn.Parameter(torch.zeros(1))
        self.null_expressiveness = nn.Parameter(torch.zeros(1))
        self.null_emotion = nn.Parameter(torch.zeros(1))
        self.mlp = nn.Sequential(
            nn.Linear(stack + 2, cond_dim),
            nn.SiLU(),
            nn.Linear(cond_dim, cond_dim),
        )

    def forward(self, cond: BatchedConditions) -> torch.Tensor:
        b, t_frames = cond.stimuli.shape
        if t_frames % self.stack != 0:
            raise ConfigError(
                f"stimuli length {t_frames} not divisible by frame stack {self.stack}"
            )
        steps = t_frames // self.stack

        stim_null = torch.isnan(cond.stimuli) | cond.null_mask[:, 0:1]
        stim = torch.where(stim_null, self.null_stimulus.to(cond.stimuli.dtype).expand_as(cond.stimuli), cond.stimuli)
        expr = torch.where(cond.null_mask[:, 1], self.null_expressiveness.to(cond.stimuli.dtype).expand(b), cond.expressiveness)
        emo = torch.where(cond.null_mask[:, 2], self.null_emotion.to(cond.stimuli.dtype).expand(b), cond.emotion)

        stim = stim.reshape(b, steps, self.stack)
        expr = expr[:, None, None].expand(b, steps, 1)
        emo = emo[:, None, None].expand(b, steps, 1)
        return self.mlp(torch.cat([stim, expr, emo], dim=-1))


class ResBlock1D(nn.Module):
    """Two 1-D convolutions with group norm and SiLU; the noise embedding is
    mapped to a per-channel (scale, shift) applied between them."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(c_in), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_num_groups(c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        scale, shift = self.emb_proj(torch.nn.functional.silu(emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[..., None]) + shift[..., None]
        h = self.conv2(torch.nn.functional.silu(h))
        return h + self.skip(x)


class SpatialAttention(nn.Module):
    """Self-attention over the d latent positions of one stacked step,
    then cross-attention whose keys/values come from that step's condition embedding."""

    def __init__(self, channels: int, cond_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_self = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj_self = nn.Linear(channels, channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.q_cross = nn.Linear(channels, channels)
        self.kv_cross = nn.Linear(cond_dim, 2 * channels)
        self.proj_cross = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        # x: (N, C, D) with N = B*T'; cond: (N, cond_dim)
        tokens = x.transpose(1, 2)
        q, k, v = self.qkv(self.norm_self(tokens)).chunk(3, dim=-1)
        tokens = tokens + self.proj_self(_attention(q, k, v, self.heads))
        q = self.q_cross(self.norm_cross(tokens))
        k, v = self.kv_cross(cond)[:, None, :].chunk(2, dim=-1)
        tokens = tokens + self.proj_cross(_attention(q, k, v, self.heads))
        return tokens.transpose(1, 2)


class TemporalAttention(nn.Module):
    """Scale/shift by the temporal + noise embeddings, then full (non-causal)
    attention across the T' stacked steps, one spatial position at a time."""

    def __init__(self, channels: int, emb_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.mod = nn.Linear(emb_dim, 2 * channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        # x: (B, T', C, D); emb: (B, T', emb_dim)
        b, t, c, d = x.shape
        tokens = x.permute(0, 3, 1, 2).reshape(b * d, t, c)
        scale, shift = self.mod(torch.nn.functional.silu(emb)).chunk(2, dim=-1)
        scale = scale[:, None].expand(b, d, t, c).reshape(b * d, t, c)
        shift = shift[:, None].expand(b, d, t, c).reshape(b * d, t, c)
        h = self.norm(tokens) * (1 + scale) + shift
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        tokens = tokens + self.proj(_attention(q, k, v, self.heads))
        return tokens.reshape(b, d, t, c).permute(0, 2, 3, 1)


class TemporalUnet(nn.Module):
    """The denoising backbone F: (noisy latents, noise labels, conditions, positions) -> prediction.

    Down path per level: ResBlock -> spatial attention -> temporal attention ->
    stride-2 downsample.  Middle: one ResBlock.  Up path mirrors the down path
    with skip concatenation and nearest-neighbor upsampling.  Output shape
    always equals input shape.
    """

    def __init__(self, config: NetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        w = config.widths
        emb, cond, heads = config.emb_dim, config.cond_dim, config.heads

        self.cond_encoder = ConditionEncoder(config.stack, cond)
        self.noise_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.in_conv = nn.Conv1d(config.stack, w[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_spatial = nn.ModuleList()
        self.down_temporal = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = w[0]
        for i, width in enumerate(w):
            self.down_res.append(ResBlock1D(prev, width, emb))
            self.down_spatial.append(SpatialAttention(width, cond, heads))
            self.down_temporal.append(TemporalAttention(width, emb, heads))
            if i < len(w) - 1:
                self.downsample.append(nn.Conv1d(width, width, 3, stride=2, padding=1))
            prev = width

        self.mid_res = ResBlock1D(w[-1], w[-1], emb)

        self.up_res = nn.ModuleList()
        self.up_spatial = nn.ModuleList()
        self.up_temporal = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, width in enumerate(w):
            upper = w[i + 1] if i < len(w) - 1 else w[-1]
            self.up_res.append(ResBlock1D(upper + width, width, emb))
            self.up_spatial.append(SpatialAttention(width, cond, heads))
            self.up_temporal.append(TemporalAttention(width, emb, heads))
            if i > 0:
                self.upsample.append(nn.Conv1d(w[i], w[i], 3, padding=1))

        self.out_norm = nn.GroupNorm(_num_groups(w[0]), w[0])
        self.out_conv = nn.Conv1d(w[0], config.stack, 3, padding=1)

        self.reset_parameters(seed)

    def _zero_init_modules(self):
        mods = [self.out_conv, self.mid_res.conv2]
        for res in list(self.down_res) + list(self.up_res):
            mods.append(res.conv2)
        for attn in list(self.down_spatial) + list(self.up_spatial):
            mods.extend([attn.proj_self, attn.proj_cross])
        for attn in list(self.down_temporal) + list(self.up_temporal):
            mods.append(attn.proj)
        return mods

    def reset_parameters(self, seed: int) -> None:
        """Deterministic variance-scaling init; residual-branch final layers start at zero."""
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Conv1d)):
                fan_in = module.weight.shape[1] * (module.weight.shape[2] if module.weight.dim() == 3 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    if module.bias is not None:
                        module.bias.zero_()
            elif isinstance(module, (nn.GroupNorm, nn.LayerNorm)):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
        with torch.no_grad():
            self.cond_encoder.null_stimulus.zero_()
            self.cond_encoder.null_expressiveness.zero_()
            self.cond_encoder.null_emotion.zero_()
            for module in self._zero_init_modules():
                module.weight.zero_()
                if module.bias is not None:
                    module.bias.zero_()

    def encode_conditions(self, cond: BatchedConditions) -> torch.Tensor:
        return self.cond_encoder(cond)

    def forward(
        self,
        z: torch.Tensor,
        noise_labels: torch.Tensor,
        cond: BatchedConditions,
        t0: int = 0,
    ) -> torch.Tensor:
        """z: (B, T', s, d); noise_labels: (B, T') noise-conditioning values."""
        if z.dim() != 4 or z.shape[2] != self.config.stack or z.shape[3] != self.config.latent_dim:
            raise ConfigError(f"input shape {tuple(z.shape)} inconsistent with {self.config}")
        b, t = z.shape[0], z.shape[1]
        if noise_labels.shape != (b, t):
            raise ConfigError(f"noise_labels shape {tuple(noise_labels.shape)} != {(b, t)}")
        dtype = z.dtype

        pos = np.arange(t0, t0 + t, dtype=np.float64)
        temb = torch.tensor(sinusoidal_embed(pos, self.config.emb_dim), dtype=dtype)
        temb = self.time_mlp(temb)[None].expand(b, t, -1)
        nemb_in = _sinusoidal_torch(noise_labels, self.config.emb_dim)
        nemb = self.noise_mlp(nemb_in)
        step_emb = nemb.reshape(b * t, -1)
        tn_emb = nemb + temb
        cemb = self.cond_encoder(cond)
        if cemb.shape[:2] != (b, t):
            raise ConfigError(
                f"condition embedding covers {tuple(cemb.shape[:2])} steps, input has {(b, t)}"
            )
        cflat = cemb.reshape(b * t, -1).to(dtype)

        x = self.in_conv(z.reshape(b * t, self.config.stack, self.config.latent_dim))

        skips = []
        for i in range(self.config.levels):
            x = self.down_res[i](x, step_emb)
            x = self.down_spatial[i](x, cflat)
            x = _temporal(self.down_temporal[i], x, tn_emb, b, t)
            skips.append(x)
            if i < self.config.levels - 1:
                x = self.downsample[i](x)

        x = self.mid_res(x, step_emb)

        for i in reversed(range(self.config.levels)):
            x = torch.cat([x, skips[i]], dim=1)
            x = self.up_res[i](x, step_emb)
            x = self.up_spatial[i](x, cflat)
            x = _temporal(self.up_temporal[i], x, tn_emb, b, t)
            if i > 0:
                x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsample[i - 1](x)

        x = self.out_conv(torch.nn.functional.silu(self.out_norm(x)))
        return x.reshape(b, t, self.config.stack, self.config.latent_dim)


def _temporal(block: TemporalAttention, x: torch.Tensor, emb: torch.Tensor, b: int, t: int) -> torch.Tensor:
    c, d = x.shape[1], x.shape[2]
    out = block(x.reshape(b, t, c, d), emb)
    return out.reshape(b * t, c, d)


def _sinusoidal_torch(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Torch-native sinusoidal embedding matching core.sinusoidal_embed."""
    k = torch.arange(dim // 2, dtype=values.dtype)
    omega = 10000.0 ** (-2.0 * k / dim)
    phase = values[..., None] * omega
    return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


def parameter_gradients(loss: torch.Tensor, net: nn.Module, check_finite: bool = True) -> dict:
    """Reverse-mode gradients of a scalar loss for every parameter of `net`.

    Parameters that do not influence the loss get zero gradients.  Non-finite
    gradients raise NumericError so training faults surface immediately.
    """
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, materialize_grads=True)
    out = dict(zip(names, grads))
    if check_finite:
        bad = [n for n, g in out.items() if not torch.isfinite(g).all()]
        if bad:
            raise NumericError(f"non-finite gradients in parameters: {bad[:5]}")
    return out
