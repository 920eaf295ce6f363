"""ECG preprocessing and augmentation.

Functions operate on arrays whose last two axes are ``(leads, time)``; a
leading batch axis is allowed everywhere. Randomized functions take an
explicit seed and never touch global RNG state.

Lead order throughout is ``I, II, III, aVR, aVL, aVF, V1 ... V6``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import median_filter

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
TARGET_RATE = 100
TARGET_LENGTH = 1000

# Dower transform, VCG (X, Y, Z) -> leads I, II, V1..V6.
# Dower, Machado & Osborne (1980), Clin. Cardiol. 3:87-95; the same table is
# reproduced by Edenbrandt & Pahlm (1988), J. Electrocardiol. 21(4):361-367.
DOWER_8 = np.array(
    [
        [0.632, -0.235, 0.059],   # I
        [0.235, 1.066, -0.132],   # II
        [-0.515, 0.157, -0.917],  # V1
        [0.044, 0.164, -1.387],   # V2
        [0.882, 0.098, -1.277],   # V3
        [1.213, 0.127, -0.601],   # V4
        [1.125, 0.127, -0.086],   # V5
        [0.831, 0.076, 0.230],    # V6
    ]
)

# Inverse Dower matrix as printed by Edenbrandt & Pahlm (1988), columns
# I, II, V1..V6. It is the pseudo-inverse of DOWER_8 rounded to 3 decimals;
# INVERSE_DOWER below uses the unrounded pseudo-inverse so that D @ D^-1 is
# an exact projection.
PUBLISHED_INVERSE_DOWER = np.array(
    [
        [0.156, -0.010, -0.172, -0.074, 0.122, 0.231, 0.239, 0.194],
        [-0.227, 0.887, 0.057, -0.019, -0.106, -0.022, 0.041, 0.048],
        [0.022, 0.102, -0.229, -0.310, -0.246, -0.063, 0.055, 0.108],
    ]
)

_INDEPENDENT = [0, 1, 6, 7, 8, 9, 10, 11]


def _dower_12() -> np.ndarray:
    d = np.zeros((12, 3))
    d[_INDEPENDENT] = DOWER_8
    lead_i, lead_ii = DOWER_8[0], DOWER_8[1]
    d[2] = lead_ii - lead_i
    d[3] = -(lead_i + lead_ii) / 2
    d[4] = lead_i - lead_ii / 2
    d[5] = lead_ii - lead_i / 2
    return d


DOWER = _dower_12()
INVERSE_DOWER = np.zeros((3, 12))
INVERSE_DOWER[:, _INDEPENDENT] = np.linalg.pinv(DOWER_8)


@dataclass
class EcgRecord:
    samples: np.ndarray
    sample_rate: int
    subject_id: int = 0
    label: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 12 or self.samples.shape[1] < 1:
            raise ValueError(f"an ECG record needs shape (12, T), got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("ECG samples must be finite")

    def preprocess(self, window_seconds: float = 0.6) -> "EcgRecord":
        out = preprocess(self.samples, self.sample_rate, window_seconds=window_seconds)
        return EcgRecord(out, TARGET_RATE, self.subject_id, self.label)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_degrees: float = 45.0
    scale_range: tuple = (0.75, 1.25)
    mask_fraction_max: float = 0.1
    noise_sigma: float = 0.05
    wander_amplitude: float = 0.1
    wander_freq: float = 0.3
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0 <= self.mask_fraction_max < 1:
            raise ValueError("mask_fraction_max must lie in [0, 1)")
        if self.noise_sigma < 0 or self.wander_amplitude < 0:
            raise ValueError("noise_sigma and wander_amplitude must be >= 0")
        if self.rotation_max_degrees < 0:
            raise ValueError("rotation_max_degrees must be >= 0")


def resample_to_100hz(x, sample_rate: int) -> np.ndarray:
    """Block-mean decimation to 100 Hz; trailing partial blocks are dropped."""
    x = np.asarray(x, dtype=np.float64)
    if sample_rate <= 0 or sample_rate % TARGET_RATE:
        raise ValueError(f"sample rate {sample_rate} Hz is not an integer multiple of 100 Hz")
    ratio = sample_rate // TARGET_RATE
    n = x.shape[-1] // ratio
    if n == 0:
        raise ValueError("record shorter than one decimation block")
    blocks = x[..., : n * ratio].reshape(*x.shape[:-1], n, ratio)
    return blocks.mean(axis=-1)


def _window_length(window_seconds: float, sample_rate: float) -> int:
    n = int(round(window_seconds * sample_rate))
    if n < 3:
        raise ValueError(f"baseline window of {n} samples is too short (need >= 3)")
    return n if n % 2 else n + 1


def moving_median(x, window: int) -> np.ndarray:
    """Centered moving median along time with edge replication (odd window)."""
    x = np.asarray(x, dtype=np.float64)
    # scipy's 1-D path is ~10x faster than a (1, ..., window) footprint
    rows = x.reshape(-1, x.shape[-1])
    out = np.empty_like(rows)
    for i, row in enumerate(rows):
        out[i] = median_filter(row, size=window, mode="nearest")
    return out.reshape(x.shape)


def remove_baseline_wander(x, sample_rate: float, window_seconds: float = 0.6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - moving_median(x, _window_length(window_seconds, sample_rate))


def normalize_leads(x) -> np.ndarray:
    """Map each lead affinely onto [-1, 1]; constant leads become zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (x - lo) / np.where(flat, 1.0, span) * 2.0 - 1.0
    return np.where(flat, 0.0, out)


def preprocess(x, sample_rate: int, window_seconds: float = 0.6) -> np.ndarray:
    """Resample, remove baseline wander and normalize to a (12, 1000) array."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != 12:
        raise ValueError(f"expected 12 leads, got {x.shape[-2]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ECG samples must be finite")
    y = resample_to_100hz(x, sample_rate)
    if y.shape[-1] < TARGET_LENGTH:
        raise ValueError(f"need at least {TARGET_LENGTH / TARGET_RATE:g} s of signal")
    y = y[..., :TARGET_LENGTH]
    y = remove_baseline_wander(y, TARGET_RATE, window_seconds)
    return normalize_leads(y)


def inverse_dower(x) -> np.ndarray:
    """12-lead ECG to 3-axis VCG."""
    return np.einsum("vl,...lt->...vt", INVERSE_DOWER, np.asarray(x))


def dower(v) -> np.ndarray:
    """3-axis VCG to 12-lead ECG."""
    return np.einsum("lv,...vt->...lt", DOWER, np.asarray(v))


def random_rotation(rng: np.random.Generator, max_degrees: float) -> np.ndarray:
    """Rotation about a uniformly random axis by an angle uniform in [0, max_degrees]."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _batched(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 2 else (x, False)


def time_mask(x, fraction: float, seed: int) -> np.ndarray:
    """Zero one contiguous window of floor(fraction * T) samples in every lead."""
    if not 0 <= fraction < 1:
        raise ValueError("mask fraction must lie in [0, 1)")
    xb, single = _batched(x)
    xb = xb.copy()
    T = xb.shape[-1]
    width = int(np.floor(fraction * T))
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, T - width + 1, size=xb.shape[0])
    if width:
        for b, s in enumerate(starts):
            xb[b, :, s : s + width] = 0.0
    return xb[0] if single else xb


def add_gaussian_noise(x, sigma: float, seed: int) -> np.ndarray:
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape)


def add_wander(x, amplitude: float, freq: float, seed: int, sample_rate: float = TARGET_RATE) -> np.ndarray:
    """Add a sinusoidal drift, one random phase per record shared by all leads."""
    xb, single = _batched(x)
    if amplitude == 0:
        return np.array(x, copy=True)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi, size=(xb.shape[0], 1, 1))
    t = np.arange(xb.shape[-1]) / sample_rate
    out = xb + amplitude * np.sin(2 * np.pi * freq * t + phase)
    return out[0] if single else out


def vcg_matrices(n: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-sample 12x12 maps D @ S @ R @ D^-1."""
    lo, hi = cfg.scale_range
    mats = np.empty((n, 12, 12))
    for b in range(n):
        rot = random_rotation(rng, cfg.rotation_max_degrees)
        scale = np.diag(rng.uniform(lo, hi, size=3))
        mats[b] = DOWER @ scale @ rot @ INVERSE_DOWER
    return mats


def vcg_augment(x, cfg: AugmentConfig, seed: Optional[int] = None) -> np.ndarray:
    """Random VCG-space rotation and scaling followed by random time masking."""
    seed = cfg.seed if seed is None else seed
    xb, single = _batched(x)
    rng = np.random.default_rng(seed)
    mats = vcg_matrices(xb.shape[0], cfg, rng)
    out = np.matmul(mats, xb)
    fraction = rng.uniform(0.0, cfg.mask_fraction_max) if cfg.mask_fraction_max else 0.0
    out = time_mask(out, fraction, int(rng.integers(2**31)))
    return out[0] if single else out


def time_domain_augment(x, cfg: AugmentConfig, seed: Optional[int] = None) -> np.ndarray:
    """Masking, Gaussian noise and baseline wander injection."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    s_mask, s_noise, s_wander = (int(s) for s in rng.integers(2**31, size=3))
    fraction = rng.uniform(0.0, cfg.mask_fraction_max) if cfg.mask_fraction_max else 0.0
    out = time_mask(x, fraction, s_mask)
    out = add_gaussian_noise(out, cfg.noise_sigma, s_noise)
    return add_wander(out, cfg.wander_amplitude, cfg.wander_freq, s_wander)
