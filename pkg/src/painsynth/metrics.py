"""The six evaluation metrics, the intensity-extraction functional, and the
nearest-neighbor / random heuristic baselines.

All metrics operate on raw-scale latent sequences (generated output is
destandardized before scoring).  DTW costs are unnormalized total path costs
with the symmetric {match, insert, delete} step pattern.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import LatentSequence, Rng
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class IntensitySignal:
    """Non-negative scalar pain-intensity proxy, one value per frame."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise DataError(f"intensity signal must be 1-D, got shape {arr.shape}")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise DataError("intensity signal must be finite and >= 0")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return len(self.values)


def _signal(x) -> np.ndarray:
    if isinstance(x, IntensitySignal):
        return x.values
    if isinstance(x, LatentSequence):
        raise ConfigError("pass an intensity signal or array, not a latent sequence")
    return np.asarray(x, dtype=np.float64)


def _weights(source) -> np.ndarray:
    if hasattr(source, "extraction_weights"):
        return np.asarray(source.extraction_weights, dtype=np.float64)
    return np.asarray(source, dtype=np.float64)


def intensity_extract(y: LatentSequence, weights_or_manifest) -> IntensitySignal:
    """Linear-clamped intensity: v_t = max(0, w . y_t)."""
    w = _weights(weights_or_manifest)
    if w.shape != (y.dim,):
        raise ConfigError(f"extraction weights shape {w.shape} != ({y.dim},)")
    return IntensitySignal(np.maximum(0.0, y.data @ w))


def dtw(a, b) -> float:
    """Dynamic-time-warping cost with local cost |a_i - b_j| and steps
    {match, insert, delete}; boundary-to-boundary, unnormalized."""
    a, b = _signal(a), _signal(b)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("dtw requires non-empty signals")
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((len(a) + 1, len(b) + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, len(a) + 1):
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i - 1]
        for j in range(1, len(b) + 1):
            row[j] = ci[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return float(acc[len(a), len(b)])


class PearsonResult(NamedTuple):
    value: float
    degenerate: bool


def pearson(a, b) -> PearsonResult:
    """Sample Pearson correlation; a constant input yields (0, degenerate=True)."""
    a, b = _signal(a), _signal(b)
    if len(a) != len(b):
        raise ConfigError(f"pearson requires equal lengths, got {len(a)} and {len(b)}")
    if len(a) < 2:
        raise ConfigError("pearson requires length >= 2")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt((da**2).sum()), np.sqrt((db**2).sum())
    if na == 0 or nb == 0:
        return PearsonResult(0.0, True)
    r = float((da * db).sum() / (na * nb))
    return PearsonResult(max(-1.0, min(1.0, r)), False)


def pain_sim(gen: LatentSequence, gt: LatentSequence, weights_or_manifest) -> float:
    """DTW between the two intensity signals (lower is better)."""
    return dtw(intensity_extract(gen, weights_or_manifest), intensity_extract(gt, weights_or_manifest))


def pain_corr(gen: LatentSequence, gt: LatentSequence, weights_or_manifest) -> PearsonResult:
    """Pearson correlation of the two intensity signals (higher is better)."""
    return pearson(intensity_extract(gen, weights_or_manifest), intensity_extract(gt, weights_or_manifest))


def pain_acc(gen: LatentSequence, stimuli, weights_or_manifest) -> float:
    """DTW between the generated intensity and the stimulus track
    (closer to the ground-truth value is better)."""
    return dtw(intensity_extract(gen, weights_or_manifest), _signal(stimuli))


def pain_dist(gen: LatentSequence, gt: LatentSequence) -> float:
    """Frame-aligned mean squared latent difference."""
    if gen.data.shape != gt.data.shape:
        raise ConfigError(f"pain_dist needs equal shapes, got {gen.data.shape} vs {gt.data.shape}")
    return float(np.mean((gen.data - gt.data) ** 2))


def pain_divrs(samples) -> float:
    """Mean pairwise MSE across generations under the same conditions."""
    if len(samples) < 2:
        raise ConfigError("pain_divrs needs at least two samples")
    total, count = 0.0, 0
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            total += pain_dist(samples[i], samples[j])
            count += 1
    return total / count


def pain_var(gen: LatentSequence) -> float:
    """Temporal variance per dimension, averaged over dimensions."""
    return float(np.mean(np.var(gen.data, axis=0)))


def baseline_nearest_neighbor(train_latents: dict, train_stimuli: dict, query_stimuli, length: int) -> LatentSequence:
    """Training window whose stimulus window is L2-closest to the query.

    Ties break toward the lowest (subject id, start index); deterministic.
    """
    query = _signal(query_stimuli)
    if len(query) != length:
        raise ConfigError(f"query length {len(query)} != requested window length {length}")
    if not train_latents:
        raise DataError("empty training set")
    best = None
    for sid in sorted(train_latents):
        track = np.asarray(train_stimuli[sid], dtype=np.float64)
        if len(track) < length:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(track, length)
        costs = ((windows - query) ** 2).sum(axis=1)
        start = int(np.argmin(costs))  # argmin returns the first (lowest) index on ties
        if best is None or costs[start] < best[0]:
            best = (float(costs[start]), sid, start)
    if best is None:
        raise DataError(f"no training sequence long enough for window length {length}")
    _, sid, start = best
    return train_latents[sid].window(start, length)


def baseline_random(train_latents: dict, rng: Rng, length: int) -> LatentSequence:
    """Uniformly random training window of the requested length."""
    if not train_latents:
        raise DataError("empty training set")
    ids = sorted(train_latents)
    sid = ids[int(rng.integers(0, len(ids)))]
    seq = train_latents[sid]
    if seq.length < length:
        raise DataError(f"sequence {sid} shorter than window length {length}")
    start = int(rng.integers(0, seq.length - length + 1))
    return seq.window(start, length)


@dataclass
class MetricsReport:
    """One evaluation row: the six metrics plus bookkeeping."""

    label: str
    pain_sim: float
    pain_corr: float
    pain_dist: float
    pain_divrs: float
    pain_var: float
    pain_acc: float
    pain_acc_gap: float | None = None  # |pain_acc - ground-truth pain_acc|
    degenerate_corr: int = 0
    sample_count: int = 0
    config_echo: dict = field(default_factory=dict)

    CSV_HEADER = (
        "label,pain_sim,pain_corr,pain_dist,pain_divrs,pain_var,pain_acc,pain_acc_gap,sample_count"
    )

    def csv_row(self) -> str:
        gap = "" if self.pain_acc_gap is None else f"{self.pain_acc_gap:.6g}"
        return (
            f"{self.label},{self.pain_sim:.6g},{self.pain_corr:.6g},{self.pain_dist:.6g},"
            f"{self.pain_divrs:.6g},{self.pain_var:.6g},{self.pain_acc:.6g},{gap},{self.sample_count}"
        )

    def to_json(self) -> str:
        payload = {
            "label": self.label,
            "pain_sim": self.pain_sim,
            "pain_corr": self.pain_corr,
            "pain_dist": self.pain_dist,
            "pain_divrs": self.pain_divrs,
            "pain_var": self.pain_var,
            "pain_acc": self.pain_acc,
            "pain_acc_gap": self.pain_acc_gap,
            "degenerate_corr": self.degenerate_corr,
            "sample_count": self.sample_count,
            "config_echo": self.config_echo,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def score_generations(label: str, per_subject: list, config_echo: dict | None = None) -> MetricsReport:
    """Aggregate per-subject scores into one report row.

    per_subject entries: dicts with keys gen_samples (list of LatentSequence),
    gt (LatentSequence), stimuli (array), weights (array).  PainSim/Corr/Acc/
    Dist/Var average over every sample; PainDivrs averages over subjects
    (0 when only one sample per subject is provided).
    """
    sims, corrs, dists, accs, variances, divs, gaps = [], [], [], [], [], [], []
    degenerate = 0
    count = 0
    for entry in per_subject:
        gt, stim, w = entry["gt"], entry["stimuli"], entry["weights"]
        gt_acc = pain_acc(gt, stim, w)
        for gen in entry["gen_samples"]:
            sims.append(pain_sim(gen, gt, w))
            r = pain_corr(gen, gt, w)
            corrs.append(r.value)
            degenerate += int(r.degenerate)
            dists.append(pain_dist(gen, gt))
            acc = pain_acc(gen, stim, w)
            accs.append(acc)
            gaps.append(abs(acc - gt_acc))
            variances.append(pain_var(gen))
            count += 1
        if len(entry["gen_samples"]) >= 2:
            divs.append(pain_divrs(entry["gen_samples"]))
        else:
            divs.append(0.0)
    return MetricsReport(
        label=label,
        pain_sim=float(np.mean(sims)),
        pain_corr=float(np.mean(corrs)),
        pain_dist=float(np.mean(dists)),
        pain_divrs=float(np.mean(divs)),
        pain_var=float(np.mean(variances)),
        pain_acc=float(np.mean(accs)),
        pain_acc_gap=float(np.mean(gaps)),
        degenerate_corr=degenerate,
        sample_count=count,
        config_echo=config_echo or {},
    )
