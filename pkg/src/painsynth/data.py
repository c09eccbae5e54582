"""Synthetic stimuli/latent dataset with a known response process, preprocessing,
and versioned dataset I/O.

The response oracle stands in for real recorded subjects: a first-order
filter drives each latent dimension toward an expressiveness-scaled,
emotion-shifted response to the (delayed) stimulus.  Because the process is
fully known, the intensity-extraction functional can be made exactly faithful
and every metric has computable ground truth.

File layout under a dataset directory:
    manifest.json              dataset manifest (JSON)
    subjects.csv               header: subject,expressiveness,emotion
    stimuli/<sid>.csv          header: frame,stimulus
    sequences/<sid>.lat        binary latent record (see LATENT_MAGIC below)

Binary record: 16-byte header = magic "LATSEQ" (6) + version uint16 +
frames uint32 + dim uint32, all little-endian, followed by frames*dim
float32 values in row-major order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NULL_STIMULUS, ConditionBundle, LatentSequence, Rng
from .errors import ConfigError, DataError

LATENT_MAGIC = b"LATSEQ"
LATENT_VERSION = 1
MANIFEST_VERSION = 1

# Rng stream ids (seed-level layout; per-subject streams offset from the bases)
STREAM_GLOBAL = 0
STREAM_SUBJECT_BASE = 1000
STREAM_NOISE_BASE = 2000


@dataclass(frozen=True)
class StimuliProfile:
    """Piecewise-trapezoid stimulus plan: ramp up, plateau, ramp down per segment.

    segments: (level, plateau_frames) pairs; ramp: frames of linear rise/fall;
    pause: optional (lo, hi) range of zero-level gap frames drawn between
    segments when an rng is supplied.
    """

    segments: tuple
    ramp: int = 8
    levels: int = 4
    pause: tuple | None = None

    def __post_init__(self):
        if self.ramp < 0:
            raise ConfigError(f"ramp must be >= 0, got {self.ramp}")
        for level, duration in self.segments:
            if duration < 1:
                raise ConfigError(f"segment durations must be >= 1, got {duration}")
            if level < 0 or level > self.levels:
                raise ConfigError(f"segment level {level} outside [0, {self.levels}]")


def gen_stimuli(profile: StimuliProfile, rng: Rng | None = None) -> np.ndarray:
    """Render a profile to a stimulus track (baseline 0 between segments).

    Ramp frame i carries level * i / ramp, so the rise starts at 0 and the
    plateau holds the exact level for its full duration.
    """
    parts = []
    for idx, (level, duration) in enumerate(profile.segments):
        if idx > 0 and profile.pause is not None and rng is not None:
            gap = int(rng.integers(profile.pause[0], profile.pause[1] + 1))
            parts.append(np.zeros(gap))
        r = profile.ramp
        rise = level * np.arange(r, dtype=np.float64) / r if r else np.empty(0)
        fall = level * np.arange(r - 1, -1, -1, dtype=np.float64) / r if r else np.empty(0)
        parts.append(np.concatenate([rise, np.full(duration, float(level)), fall]))
    track = np.concatenate(parts) if parts else np.zeros(0)
    return track


@dataclass(frozen=True)
class SubjectProfile:
    """Hidden generation parameters for one synthetic subject."""

    subject_id: str
    expressiveness: float
    emotion: float
    response_gain: np.ndarray  # (d,) response direction
    latency_frames: int
    decay: float

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ConfigError(f"decay must be in (0, 1), got {self.decay}")
        if self.latency_frames < 0:
            raise ConfigError(f"latency must be >= 0, got {self.latency_frames}")
        gain = np.asarray(self.response_gain, dtype=np.float64)
        object.__setattr__(self, "response_gain", gain)


def saturating_response(x):
    """Monotone saturating nonlinearity f(x) = x / (1 + x) for x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + x)


def emotion_offset(emotion: float, dim: int) -> np.ndarray:
    """Fixed per-dimension sinusoidal offset of the emotion scalar (small vs. unit gain)."""
    k = np.arange(dim, dtype=np.float64)
    return (0.5 / math.sqrt(dim)) * np.sin(emotion + 2.0 * np.pi * k / dim)


def oracle_response(
    stimuli: np.ndarray,
    subject: SubjectProfile,
    rng: Rng | None,
    noise_std: float = 0.02,
    dim_scale: np.ndarray | None = None,
    frame_rate: float = 25.0,
) -> LatentSequence:
    """Ground-truth latent response to a stimulus track.

    y_t = decay * y_{t-1} + (1 - decay) * P * f(c_{t-latency}) * (gain + e(E))
          + noise_t,  y_{-1} = 0,
    with f saturating and e a fixed sinusoidal shaping of the emotion scalar.
    dim_scale multiplies the drive and noise per dimension (used to give the
    jaw dimensions their realistically small raw variance).
    """
    stimuli = np.asarray(stimuli, dtype=np.float64)
    d = subject.response_gain.shape[0]
    scale = np.ones(d) if dim_scale is None else np.asarray(dim_scale, dtype=np.float64)
    direction = (subject.response_gain + emotion_offset(subject.emotion, d)) * scale

    lat = subject.latency_frames
    delayed = np.concatenate([np.zeros(lat), stimuli])[: len(stimuli)]
    drive = subject.expressiveness * saturating_response(delayed)[:, None] * direction[None, :]

    if rng is None or noise_std == 0:
        noise = np.zeros((len(stimuli), d))
    else:
        noise = rng.normal((len(stimuli), d)) * noise_std * scale[None, :]

    y = np.zeros((len(stimuli), d))
    prev = np.zeros(d)
    a = subject.decay
    for t in range(len(stimuli)):
        prev = a * prev + (1.0 - a) * drive[t] + noise[t]
        y[t] = prev
    return LatentSequence(y, frame_rate=frame_rate)


@dataclass
class DatasetManifest:
    """Dataset-level facts needed to interpret the stored sequences."""

    latent_dim: int
    frame_rate: float
    stack: int
    train_subjects: list
    val_subjects: list
    mean: np.ndarray
    std: np.ndarray
    extraction_weights: np.ndarray
    jaw_dims: tuple
    jaw_scale: float = 100.0
    seed: int = 0
    config_echo: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.extraction_weights = np.asarray(self.extraction_weights, dtype=np.float64)
        self.jaw_dims = tuple(int(j) for j in self.jaw_dims)
        if (self.std <= 0).any():
            bad = int(np.argmax(self.std <= 0))
            raise DataError(f"standardization std must be positive; dim {bad} is {self.std[bad]}")

    @property
    def subjects(self) -> list:
        return list(self.train_subjects) + list(self.val_subjects)

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "latent_dim": self.latent_dim,
            "frame_rate": self.frame_rate,
            "stack": self.stack,
            "train_subjects": list(self.train_subjects),
            "val_subjects": list(self.val_subjects),
            "mean": [repr(float(v)) for v in self.mean],
            "std": [repr(float(v)) for v in self.std],
            "extraction_weights": [repr(float(v)) for v in self.extraction_weights],
            "jaw_dims": list(self.jaw_dims),
            "jaw_scale": self.jaw_scale,
            "seed": self.seed,
            "config_echo": self.config_echo,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        raw = json.loads(text)
        version = raw.pop("version", None)
        if version != MANIFEST_VERSION:
            raise DataError(f"manifest version {version} unsupported (expected {MANIFEST_VERSION})")
        for key in ("mean", "std", "extraction_weights"):
            raw[key] = np.array([float(v) for v in raw[key]], dtype=np.float64)
        raw["jaw_dims"] = tuple(raw["jaw_dims"])
        return DatasetManifest(**raw)


@dataclass
class Dataset:
    """In-memory dataset: raw-scale latents plus stimuli and subject scalars."""

    manifest: DatasetManifest
    latents: dict
    stimuli: dict
    subjects: dict  # sid -> (expressiveness, emotion)

    def bundle(self, sid: str) -> ConditionBundle:
        expr, emo = self.subjects[sid]
        return ConditionBundle(self.stimuli[sid], expr, emo)


def standardize(x: LatentSequence, manifest: DatasetManifest) -> LatentSequence:
    """Jaw-dim rescale then per-dim zero-mean/unit-std transform (training stats)."""
    data = np.array(x.data, dtype=np.float64)
    data[:, list(manifest.jaw_dims)] *= manifest.jaw_scale
    data = (data - manifest.mean) / manifest.std
    return LatentSequence(data, frame_rate=x.frame_rate)


def destandardize(x: LatentSequence, manifest: DatasetManifest) -> LatentSequence:
    """Exact inverse of standardize."""
    data = np.array(x.data, dtype=np.float64) * manifest.std + manifest.mean
    data[:, list(manifest.jaw_dims)] /= manifest.jaw_scale
    return LatentSequence(data, frame_rate=x.frame_rate)


def compute_standardization(latents: dict, train_ids, jaw_dims, jaw_scale: float):
    """Per-dim mean/std over the training split only, after the jaw rescale."""
    rows = []
    for sid in train_ids:
        data = np.array(latents[sid].data, dtype=np.float64)
        data[:, list(jaw_dims)] *= jaw_scale
        rows.append(data)
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    if (std <= 0).any():
        bad = int(np.argmax(std <= 0))
        raise DataError(f"constant training dimension {bad}: standardization undefined")
    return mean, std


@dataclass(frozen=True)
class DataGenConfig:
    n_train: int = 40
    n_val: int = 10
    latent_dim: int = 8
    frames: int = 480
    frame_rate: float = 25.0
    stack: int = 4
    jaw_count: int = 3
    jaw_scale: float = 100.0
    jaw_shrink: float = 0.01
    noise_std: float = 0.02
    low_expression_fraction: float = 0.2

    def __post_init__(self):
        if self.jaw_count >= self.latent_dim:
            raise ConfigError("jaw_count must leave at least one expression dim")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("need at least one train and one validation subject")


def _random_profile(rng: Rng, frames: int, levels: int = 4) -> StimuliProfile:
    segments = []
    total = 0
    while total < frames:
        level = int(rng.integers(1, levels + 1))
        plateau = int(rng.integers(20, 51))
        segments.append((level, plateau))
        total += plateau + 2 * 10 + 30  # rough frame budget incl. ramps and pause
    return StimuliProfile(segments=tuple(segments), ramp=int(rng.integers(5, 13)), levels=levels, pause=(15, 50))


def _draw_subject(sid: str, rng: Rng, gain: np.ndarray, low: bool) -> SubjectProfile:
    expressiveness = float(rng.uniform((), 0.1, 0.4) if low else rng.uniform((), 0.7, 1.8))
    return SubjectProfile(
        subject_id=sid,
        expressiveness=expressiveness,
        emotion=float(rng.uniform((), -1.5, 1.5)),
        response_gain=gain,
        latency_frames=int(rng.integers(0, 7)),
        decay=float(rng.uniform((), 0.82, 0.94)),
    )


def generate_dataset(cfg: DataGenConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset: same (cfg, seed) -> identical bytes on disk."""
    d = cfg.latent_dim
    jaw_dims = tuple(range(d - cfg.jaw_count, d))
    global_rng = Rng(seed, STREAM_GLOBAL)

    # shared response direction with deliberately small jaw components; the
    # extraction functional reuses it, which keeps intensity faithful
    gain = global_rng.normal((d,))
    gain[list(jaw_dims)] *= 0.05
    gain /= np.linalg.norm(gain)

    dim_scale = np.ones(d)
    dim_scale[list(jaw_dims)] = cfg.jaw_shrink

    n = cfg.n_train + cfg.n_val
    ids = [f"s{i:03d}" for i in range(n)]
    train_ids, val_ids = ids[: cfg.n_train], ids[cfg.n_train :]

    def low_flags(group):
        k = max(1, round(cfg.low_expression_fraction * len(group)))
        return {sid: i < k for i, sid in enumerate(group)}

    low = {**low_flags(train_ids), **low_flags(val_ids)}

    latents, stimuli, subjects = {}, {}, {}
    for i, sid in enumerate(ids):
        srng = Rng(seed, STREAM_SUBJECT_BASE + i)
        nrng = Rng(seed, STREAM_NOISE_BASE + i)
        profile = _random_profile(srng, cfg.frames)
        track = gen_stimuli(profile, srng)
        track = np.concatenate([track, np.zeros(max(0, cfg.frames - len(track)))])[: cfg.frames]
        subject = _draw_subject(sid, srng, gain, low[sid])
        seq = oracle_response(track, subject, nrng, cfg.noise_std, dim_scale, cfg.frame_rate)
        latents[sid] = LatentSequence(seq.data.astype(np.float32), cfg.frame_rate)
        stimuli[sid] = track
        subjects[sid] = (subject.expressiveness, subject.emotion)

    mean, std = compute_standardization(latents, train_ids, jaw_dims, cfg.jaw_scale)
    manifest = DatasetManifest(
        latent_dim=d,
        frame_rate=cfg.frame_rate,
        stack=cfg.stack,
        train_subjects=train_ids,
        val_subjects=val_ids,
        mean=mean,
        std=std,
        extraction_weights=gain,
        jaw_dims=jaw_dims,
        jaw_scale=cfg.jaw_scale,
        seed=seed,
        config_echo={"datagen": cfg.__dict__ | {"seed": seed}},
    )
    return Dataset(manifest, latents, stimuli, subjects)


def sample_training_window(dataset: Dataset, length: int, rng: Rng):
    """Random training window plus its conditions; with probability 0.5 the
    leading part of the stimulus window (random positive length < T) is
    replaced by the null sentinel, emulating short-condition onsets."""
    train = dataset.manifest.train_subjects
    sid = train[int(rng.integers(0, len(train)))]
    seq = dataset.latents[sid]
    if length > seq.length:
        raise ConfigError(f"window length {length} exceeds sequence length {seq.length}")
    start = int(rng.integers(0, seq.length - length + 1))
    window = seq.window(start, length)
    expr, emo = dataset.subjects[sid]
    stim = np.array(dataset.stimuli[sid][start : start + length], dtype=np.float64)
    if length > 1 and rng.uniform(()) < 0.5:
        cut = int(rng.integers(1, length))
        stim[:cut] = NULL_STIMULUS
    return window, ConditionBundle(stim, expr, emo)


# ---------------------------------------------------------------------------
# Dataset I/O


def write_latent_record(path: Path, seq: LatentSequence) -> None:
    data = np.ascontiguousarray(seq.data, dtype="<f4")
    header = LATENT_MAGIC + struct.pack("<HII", LATENT_VERSION, seq.length, seq.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_latent_record(path: Path, frame_rate: float) -> LatentSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:6] != LATENT_MAGIC:
        raise DataError(f"{path.name}: not a latent record (bad magic)")
    version, frames, dim = struct.unpack("<HII", raw[6:16])
    if version != LATENT_VERSION:
        raise DataError(f"{path.name}: record version {version} unsupported (expected {LATENT_VERSION})")
    expected = 16 + frames * dim * 4
    if len(raw) != expected:
        raise DataError(f"{path.name}: truncated or oversized record ({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(frames, dim)
    return LatentSequence(data.astype(np.float32), frame_rate=frame_rate)


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "sequences").mkdir(parents=True, exist_ok=True)
    (root / "stimuli").mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(dataset.manifest.to_json())
    with open(root / "subjects.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "expressiveness", "emotion"])
        for sid in dataset.manifest.subjects:
            expr, emo = dataset.subjects[sid]
            writer.writerow([sid, repr(float(expr)), repr(float(emo))])
    for sid in dataset.manifest.subjects:
        write_latent_record(root / "sequences" / f"{sid}.lat", dataset.latents[sid])
        with open(root / "stimuli" / f"{sid}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "stimulus"])
            for frame, value in enumerate(dataset.stimuli[sid]):
                writer.writerow([frame, repr(float(value))])


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(manifest_path.read_text())

    subjects = {}
    with open(root / "subjects.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            subjects[row["subject"]] = (float(row["expressiveness"]), float(row["emotion"]))

    latents, stimuli = {}, {}
    for sid in manifest.subjects:
        if sid not in subjects:
            raise DataError(f"subject {sid} listed in manifest but missing from subjects.csv")
        seq = read_latent_record(root / "sequences" / f"{sid}.lat", manifest.frame_rate)
        if seq.dim != manifest.latent_dim:
            raise DataError(
                f"{sid}: record dim {seq.dim} disagrees with manifest latent_dim {manifest.latent_dim}"
            )
        latents[sid] = seq
        with open(root / "stimuli" / f"{sid}.csv", newline="") as fh:
            reader = csv.DictReader(fh)
            values = [float(row["stimulus"]) for row in reader]
        if len(values) != seq.length:
            raise DataError(f"{sid}: stimuli length {len(values)} != sequence length {seq.length}")
        stimuli[sid] = np.asarray(values, dtype=np.float64)
    return Dataset(manifest, latents, stimuli, subjects)
