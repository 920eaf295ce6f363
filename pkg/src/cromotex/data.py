"""Synthetic paired ECG / second-modality data, splits, sampling and file IO.

The generator draws a binary label and a label-shifted Gaussian latent per
subject. The ECG is a latent-modulated mix of fixed per-lead sinusoidal
templates plus drift and noise, pushed through the real preprocessing chain.
The second modality is a tanh-squashed random linear map of the latent with
a direct label component, observed with less noise than the ECG.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .signal import TARGET_LENGTH, preprocess

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int = 4000
    records_per_subject: int = 1
    positive_rate: float = 0.2
    latent_dim: int = 8
    feature_dim: int = 32
    label_shift: float = 1.5
    n_label_features: int = 2
    label_feature_value: float = 2.0
    label_mix: float = 1.0
    n_components: int = 4
    latent_coupling: float = 0.35
    amplitude_jitter: float = 0.0
    ecg_noise_sigma: float = 1.0
    modality_b_noise_sigma: float = 0.3
    ecg_missing_rate: float = 0.1
    sample_rate: int = 500
    world_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 0 or self.records_per_subject < 1:
            raise ValueError("n_subjects must be >= 0 and records_per_subject >= 1")
        if not 0 < self.positive_rate < 1:
            raise ValueError("positive_rate must lie in (0, 1)")
        if not self.ecg_noise_sigma >= self.modality_b_noise_sigma >= 0:
            raise ValueError("need ecg_noise_sigma >= modality_b_noise_sigma >= 0")
        if not 0 <= self.ecg_missing_rate < 1:
            raise ValueError("ecg_missing_rate must lie in [0, 1)")
        if self.sample_rate % 100:
            raise ValueError("sample_rate must be a multiple of 100 Hz")
        if self.latent_coupling < 0 or self.amplitude_jitter < 0:
            raise ValueError("latent_coupling and amplitude_jitter must be >= 0")
        if not 0 <= self.n_label_features <= self.feature_dim:
            raise ValueError("n_label_features must lie in [0, feature_dim]")


@dataclass
class PairedDataset:
    ecg: np.ndarray            # (N, 12, 1000) float32
    modality_b: np.ndarray     # (N, F) float32
    labels: np.ndarray         # (N,) int8
    subject_ids: np.ndarray    # (N,) int64
    ecg_present: np.ndarray    # (N,) bool

    def __post_init__(self):
        n = len(self.labels)
        for name in ("ecg", "modality_b", "subject_ids", "ecg_present"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(self.ecg[idx], self.modality_b[idx], self.labels[idx],
                             self.subject_ids[idx], self.ecg_present[idx])

    def paired(self) -> "PairedDataset":
        """Rows with an ECG present."""
        return self.subset(np.flatnonzero(self.ecg_present))

    @classmethod
    def empty(cls, feature_dim: int, length: int = TARGET_LENGTH) -> "PairedDataset":
        return cls(np.zeros((0, 12, length), np.float32), np.zeros((0, feature_dim), np.float32),
                   np.zeros(0, np.int8), np.zeros(0, np.int64), np.zeros(0, bool))


@dataclass(frozen=True)
class _World:
    freqs: np.ndarray       # (K,)
    amp: np.ndarray         # (12, K)
    phase: np.ndarray       # (12, K)
    mod: np.ndarray         # (12 * K, latent)
    shift_dir: np.ndarray   # (latent,)
    proj: np.ndarray        # (F, latent)
    label_vec: np.ndarray   # (F,)
    offset: np.ndarray      # (F,)


def _world(cfg: GeneratorConfig) -> _World:
    rng = np.random.default_rng(cfg.world_seed)
    K, D, F = cfg.n_components, cfg.latent_dim, cfg.feature_dim
    shift_dir = rng.standard_normal(D)
    shift_dir /= np.linalg.norm(shift_dir)
    proj = rng.standard_normal((F, D)) / np.sqrt(D)
    proj[: cfg.n_label_features] = 0.0
    label_vec = rng.uniform(0.5, 1.0, F) * rng.choice([-1.0, 1.0], F) * cfg.label_mix
    label_vec[: cfg.n_label_features] = cfg.label_feature_value
    return _World(
        freqs=np.sort(rng.uniform(3.0, 18.0, K)),
        amp=rng.uniform(0.5, 1.5, (12, K)),
        phase=rng.uniform(0, 2 * np.pi, (12, K)),
        mod=rng.standard_normal((12 * K, D)) * cfg.latent_coupling,
        shift_dir=shift_dir,
        proj=proj,
        label_vec=label_vec,
        offset=np.zeros(F),
    )


_CHUNK = 256  # records per synthesis block; part of the random stream order, so fixed


def generate_dataset(cfg: GeneratorConfig) -> PairedDataset:
    """Draw a synthetic paired dataset; identical configs give identical bytes."""
    world = _world(cfg)
    rng = np.random.default_rng(cfg.seed)
    S, R = cfg.n_subjects, cfg.records_per_subject
    subj_labels = (rng.random(S) < cfg.positive_rate).astype(np.int8)
    latent = rng.standard_normal((S, cfg.latent_dim)) + cfg.label_shift * subj_labels[:, None] * world.shift_dir

    n = S * R
    labels = np.repeat(subj_labels, R)
    subject_ids = np.repeat(np.arange(S, dtype=np.int64), R)
    u = np.repeat(latent, R, axis=0)
    present = rng.random(n) >= cfg.ecg_missing_rate

    feats = np.tanh(u @ world.proj.T + labels[:, None] * world.label_vec + world.offset)
    feats = feats + cfg.modality_b_noise_sigma * rng.standard_normal(feats.shape)

    T_raw = TARGET_LENGTH * cfg.sample_rate // 100
    t = np.arange(T_raw) / cfg.sample_rate
    sin_basis = np.sin(2 * np.pi * world.freqs[:, None] * t)
    cos_basis = np.cos(2 * np.pi * world.freqs[:, None] * t)
    drift_sin = np.sin(2 * np.pi * 0.2 * t)
    drift_cos = np.cos(2 * np.pi * 0.2 * t)
    ecg = np.zeros((n, 12, TARGET_LENGTH), dtype=np.float32)
    K = cfg.n_components
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(n, start + _CHUNK))
        m = sl.stop - sl.start
        log_amp = (u[sl] @ world.mod.T).reshape(m, 12, K)
        if cfg.amplitude_jitter:
            log_amp = log_amp + cfg.amplitude_jitter * rng.standard_normal(log_amp.shape)
        amp = world.amp * np.exp(log_amp)
        raw = (amp * np.cos(world.phase)) @ sin_basis + (amp * np.sin(world.phase)) @ cos_basis
        drift_phase = rng.uniform(0, 2 * np.pi, (m, 12, 1))
        drift_amp = rng.uniform(0.5, 1.5, (m, 12, 1))
        raw += (drift_amp * np.cos(drift_phase)) * drift_sin + (drift_amp * np.sin(drift_phase)) * drift_cos
        raw += cfg.ecg_noise_sigma * rng.standard_normal(raw.shape)
        ecg[sl] = preprocess(raw, cfg.sample_rate)
    ecg[~present] = 0.0
    return PairedDataset(ecg, feats.astype(np.float32), labels, subject_ids, present)


# ---------------------------------------------------------------- splits

def split_by_subject(subject_ids, fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> dict:
    """Seeded shuffle of unique subject ids, assigned contiguously by fraction."""
    ids = np.unique(np.asarray(subject_ids))
    if ids.size == 0:
        raise ValueError("no subject ids to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    order = np.random.default_rng(seed).permutation(ids)
    n_train = int(round(fractions[0] * ids.size))
    n_val = int(round(fractions[1] * ids.size))
    n_val = min(n_val, ids.size - n_train)
    out = {}
    for i, sid in enumerate(order.tolist()):
        out[sid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return out


def split_indices(dataset: PairedDataset, assignment: dict) -> dict:
    names = np.array([assignment[int(s)] for s in dataset.subject_ids])
    return {name: np.flatnonzero(names == name) for name in SPLITS}


# ---------------------------------------------------------------- sampling

def sample_weights(labels, minority_target: float = 0.275) -> np.ndarray:
    """Per-sample probabilities giving an expected positive fraction of ``minority_target``."""
    labels = np.asarray(labels).reshape(-1)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("weighted sampling needs both classes present")
    if not 0 < minority_target < 1:
        raise ValueError("minority_target must lie in (0, 1)")
    return np.where(labels == 1, minority_target / n_pos, (1 - minority_target) / n_neg)


def weighted_batches(labels, batch_size: int, minority_target: float = 0.275, seed: int = 0) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn with replacement."""
    p = sample_weights(labels, minority_target)
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield rng.choice(p.size, size=batch_size, replace=True, p=p)


# ---------------------------------------------------------------- file IO

MAGIC = b"CMTX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBIHII")
_RECORD_META = struct.Struct("<qBB")


class DatasetFormatError(ValueError):
    code = 0


class BadMagicError(DatasetFormatError):
    code = 1


class VersionMismatchError(DatasetFormatError):
    code = 2


class TruncatedPayloadError(DatasetFormatError):
    code = 3


class ChecksumError(DatasetFormatError):
    code = 4


def write_dataset(path, dataset: PairedDataset) -> None:
    """Write the CMTX format (see README for the byte layout)."""
    n = len(dataset)
    leads, length = dataset.ecg.shape[1:]
    F = dataset.modality_b.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, leads, length, F))
        for i in range(n):
            body = (
                _RECORD_META.pack(int(dataset.subject_ids[i]), int(dataset.labels[i]), int(dataset.ecg_present[i]))
                + np.ascontiguousarray(dataset.ecg[i], dtype="<f4").tobytes()
                + np.ascontiguousarray(dataset.modality_b[i], dtype="<f4").tobytes()
            )
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))


def read_dataset(path) -> PairedDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        if not blob.startswith(MAGIC[: len(blob)]) or len(blob) < 4:
            raise BadMagicError(f"{path}: not a CMTX file")
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, version, n, leads, length, F = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body_size = _RECORD_META.size + 4 * (leads * length + F)
    if len(blob) < _HEADER.size + n * (body_size + 4):
        raise TruncatedPayloadError(f"{path}: expected {n} records, payload is truncated")
    ecg = np.empty((n, leads, length), np.float32)
    feats = np.empty((n, F), np.float32)
    labels = np.empty(n, np.int8)
    sids = np.empty(n, np.int64)
    present = np.empty(n, bool)
    off = _HEADER.size
    for i in range(n):
        body = blob[off : off + body_size]
        (crc,) = struct.unpack_from("<I", blob, off + body_size)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in record {i}")
        sids[i], labels[i], present[i] = _RECORD_META.unpack_from(body)
        p = _RECORD_META.size
        ecg[i] = np.frombuffer(body, "<f4", leads * length, p).reshape(leads, length)
        feats[i] = np.frombuffer(body, "<f4", F, p + 4 * leads * length)
        off += body_size + 4
    return PairedDataset(ecg, feats, labels, sids, present)
