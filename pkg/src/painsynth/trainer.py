"""Training loop with linear warmup, EMA shadow weights, JSONL logging, and
versioned checkpoints.

Checkpoint file layout: magic "PSCKPT" + uint16 version + uint32 header length
+ UTF-8 JSON header (configs, step, manifest hash) + a serialized tensor
payload (raw weights, EMA shadow, optimizer state, RNG stream states).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core import Rng, stack_frames
from .data import Dataset, sample_training_window, standardize
from .edm import EdmParams, SigmaGrid, karras_grid, training_loss
from .errors import ConfigError, DataError, NumericError
from .guidance import condition_dropout
from .net import BatchedConditions, NetConfig, TemporalUnet

CKPT_MAGIC = b"PSCKPT"
CKPT_VERSION = 1

# trainer-owned rng stream ids (dataset generation uses 0 and 1000+/2000+)
STREAM_TRAIN_DATA = 1
STREAM_TRAIN_NOISE = 2
STREAM_TRAIN_DROPOUT = 3


@dataclass(frozen=True)
class TrainConfig:
    """Reference-scale defaults; desk-scale runs override via the CLI config."""

    seq_len: int = 64
    batch_size: int = 16
    total_steps: int = 300_000
    warmup_steps: int = 5000
    lr: float = 4e-4
    ema_decay: float = 0.999
    dropout_p: float = 0.1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    noise_mode: str = "lognormal"  # "lognormal" | "grid"
    grid_levels: int = 35
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema decay must be in [0, 1), got {self.ema_decay}")
        if self.noise_mode not in ("lognormal", "grid"):
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")


@dataclass
class TrainState:
    net: TemporalUnet
    optimizer: torch.optim.Optimizer
    ema: dict
    config: TrainConfig
    edm_params: EdmParams
    data_rng: Rng
    noise_rng: Rng
    drop_rng: Rng
    grid: SigmaGrid | None = None
    step: int = 0


def init_train_state(net_config: NetConfig, config: TrainConfig, edm_params: EdmParams = EdmParams()) -> TrainState:
    net = TemporalUnet(net_config, seed=config.seed)
    optimizer = torch.optim.AdamW(
        net.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    ema = {name: p.detach().clone() for name, p in net.named_parameters()}
    grid = karras_grid(config.grid_levels, edm_params) if config.noise_mode == "grid" else None
    return TrainState(
        net=net,
        optimizer=optimizer,
        ema=ema,
        config=config,
        edm_params=edm_params,
        data_rng=Rng(config.seed, STREAM_TRAIN_DATA),
        noise_rng=Rng(config.seed, STREAM_TRAIN_NOISE),
        drop_rng=Rng(config.seed, STREAM_TRAIN_DROPOUT),
        grid=grid,
    )


def warmup_lr(config: TrainConfig, step: int) -> float:
    """Linear warmup to the base rate: lr * k / warmup for step k < warmup (1-based)."""
    if config.warmup_steps == 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup_steps)


def sample_batch(dataset: Dataset, seq_len: int, batch_size: int, rng: Rng):
    """Standardized training windows stacked for the network, plus their bundles."""
    windows, bundles = [], []
    stack = dataset.manifest.stack
    for _ in range(batch_size):
        window, bundle = sample_training_window(dataset, seq_len, rng)
        std = standardize(window, dataset.manifest)
        windows.append(stack_frames(std, stack).data)
        bundles.append(bundle)
    y = torch.tensor(np.stack(windows), dtype=torch.float32)
    return y, bundles


def train_step(state: TrainState, batch) -> dict:
    """One optimization step: dropout, per-step noise, gradient update, EMA."""
    y, bundles = batch
    config = state.config
    state.step += 1
    lr = warmup_lr(config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    dropped = [condition_dropout(b, config.dropout_p, state.drop_rng) for b in bundles]
    cond = BatchedConditions.from_bundles(dropped, dtype=y.dtype)

    sigma_per_step = None
    if config.noise_mode == "grid":
        idx = state.noise_rng.integers(0, state.grid.steps + 1, (y.shape[0], y.shape[1]))
        sigma_per_step = state.grid.sigma_for_noise_index(idx)

    loss, details = training_loss(
        state.net, state.edm_params, y, cond, state.noise_rng,
        sigma_per_step=sigma_per_step, return_details=True,
    )
    loss_value = float(loss.detach())
    if not torch.isfinite(loss):
        sig = details["sigma"]
        raise NumericError(
            f"non-finite loss at step {state.step}; sigma draws in [{sig.min():.3g}, {sig.max():.3g}]"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_sq = 0.0
    for p in state.net.parameters():
        if p.grad is not None:
            if not torch.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient at step {state.step}")
            grad_sq += float((p.grad.double() ** 2).sum())
    state.optimizer.step()

    with torch.no_grad():
        d = config.ema_decay
        for name, p in state.net.named_parameters():
            state.ema[name].mul_(d).add_(p.detach(), alpha=1.0 - d)

    return {"step": state.step, "loss": loss_value, "lr": lr, "grad_norm": math.sqrt(grad_sq)}


def train(
    dataset: Dataset,
    net_config: NetConfig,
    config: TrainConfig,
    edm_params: EdmParams = EdmParams(),
    state: TrainState | None = None,
    log_path=None,
    fixed_batch=None,
    progress_every: int = 0,
) -> TrainState:
    """Run (or resume) training to config.total_steps; one JSONL log line per step."""
    if state is None:
        state = init_train_state(net_config, config, edm_params)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.step < config.total_steps:
            batch = fixed_batch if fixed_batch is not None else sample_batch(
                dataset, config.seq_len, config.batch_size, state.data_rng
            )
            record = train_step(state, batch)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if progress_every and record["step"] % progress_every == 0:
                print(f"step {record['step']}: loss {record['loss']:.4f} lr {record['lr']:.2e}")
    finally:
        if log_fh:
            log_fh.close()
    return state


def ema_net(state: TrainState) -> TemporalUnet:
    """Fresh network carrying the EMA shadow weights (used for evaluation)."""
    net = TemporalUnet(state.net.config, seed=0)
    with torch.no_grad():
        for name, p in net.named_parameters():
            p.copy_(state.ema[name])
    net.eval()
    return net


def save_checkpoint(path, state: TrainState, manifest_hash: str = "", config_echo: dict | None = None) -> None:
    header = {
        "version": CKPT_VERSION,
        "step": state.step,
        "net_config": state.net.config.to_dict(),
        "train_config": asdict(state.config),
        "edm_params": asdict(state.edm_params),
        "manifest_hash": manifest_hash,
        "config_echo": config_echo or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = {
        "weights": state.net.state_dict(),
        "ema": state.ema,
        "optimizer": state.optimizer.state_dict(),
        "rng": {
            "data": state.data_rng.get_state(),
            "noise": state.noise_rng.get_state(),
            "drop": state.drop_rng.get_state(),
        },
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[TrainState, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:6] != CKPT_MAGIC:
        raise DataError(f"{Path(path).name}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<HI", raw[6:12])
    if version != CKPT_VERSION:
        raise DataError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    payload = torch.load(io.BytesIO(raw[12 + header_len :]), weights_only=False)

    net_config = NetConfig.from_dict(header["net_config"])
    config = TrainConfig(**header["train_config"])
    edm_params = EdmParams(**header["edm_params"])
    state = init_train_state(net_config, config, edm_params)
    state.net.load_state_dict(payload["weights"])
    state.ema = payload["ema"]
    state.optimizer.load_state_dict(payload["optimizer"])
    state.data_rng.set_state(payload["rng"]["data"])
    state.noise_rng.set_state(payload["rng"]["noise"])
    state.drop_rng.set_state(payload["rng"]["drop"])
    state.step = header["step"]
    return state, header
