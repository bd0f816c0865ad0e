"""Log-mel features, per-utterance normalization and training augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .audio import SAMPLE_RATE, AudioBuffer, interp_to_length

N_MELS = 80
N_FFT = 512
WIN_LENGTH = 400  # 25 ms at 16 kHz
HOP_LENGTH = 160  # 10 ms at 16 kHz
LOG_EPS = 2.0**-24
STD_FLOOR = 1e-5


@dataclass(eq=False)
class FeatureMatrix:
    values: np.ndarray  # (n_mels, T)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError(f"feature matrix must be (n_mels, T>=1), got {self.values.shape}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), peak 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


@lru_cache(maxsize=1)
def _window() -> np.ndarray:
    return get_window("hann", WIN_LENGTH)


def n_frames_for(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        return 0
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def logmel_frames(frames: np.ndarray) -> np.ndarray:
    """Log-mel energies of framed audio (n, WIN_LENGTH) -> (N_MELS, n)."""
    spec = np.fft.rfft(frames * _window(), n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ mel_filterbank().T + LOG_EPS).T


def compute_logmel(buf: AudioBuffer) -> FeatureMatrix:
    if buf.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {buf.sample_rate} Hz; resample first")
    T = n_frames_for(len(buf))
    if T < 1:
        raise ValueError(f"audio of {len(buf)} samples is shorter than one {WIN_LENGTH}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(buf.samples, WIN_LENGTH)[::HOP_LENGTH][:T]
    return FeatureMatrix(logmel_frames(frames))


def feature_stats(F: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and floored standard deviation over time."""
    mean = F.values.mean(axis=1)
    std = np.maximum(F.values.std(axis=1), STD_FLOOR)
    return mean, std


def normalize_features(F: FeatureMatrix, mode: str = "per_bin",
                       stats: tuple[np.ndarray, np.ndarray] | None = None) -> FeatureMatrix:
    """Standardize features.

    ``per_bin`` (default) standardizes each mel bin over time. ``per_frame``
    standardizes each frame over mel bins instead. Passing ``stats`` applies
    precomputed per-bin (mean, std) rather than the utterance's own.
    """
    x = F.values
    if stats is not None:
        mean, std = stats
        return FeatureMatrix((x - mean[:, None]) / np.maximum(std, STD_FLOOR)[:, None])
    if mode == "per_bin":
        mean, std = feature_stats(F)
        return FeatureMatrix((x - mean[:, None]) / std[:, None])
    if mode == "per_frame":
        mean = x.mean(axis=0, keepdims=True)
        std = np.maximum(x.std(axis=0, keepdims=True), STD_FLOOR)
        return FeatureMatrix((x - mean) / std)
    raise ValueError(f"unknown normalization mode {mode!r}")


def extract(buf: AudioBuffer, mode: str = "per_bin") -> FeatureMatrix:
    return normalize_features(compute_logmel(buf), mode=mode)


def write_features(F: FeatureMatrix, path) -> None:
    """Little-endian float32 row-major (n_mels, T) after an 8-byte b'LMEL' + T header."""
    with open(path, "wb") as f:
        f.write(b"LMEL" + struct.pack("<I", F.n_frames))
        f.write(np.ascontiguousarray(F.values, dtype="<f4").tobytes())


def read_features(path, n_mels: int = N_MELS) -> FeatureMatrix:
    with open(path, "rb") as f:
        head = f.read(8)
        if head[:4] != b"LMEL":
            raise ValueError(f"{path}: not a feature dump")
        (T,) = struct.unpack("<I", head[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    return FeatureMatrix(data.reshape(n_mels, T).astype(np.float64))


# --- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    speed_prob: float = 0.5
    speed_range: tuple[float, float] = (0.95, 1.05)
    freq_masks: int = 3
    freq_width: int = 4
    time_masks: int = 5
    time_width: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.speed_prob <= 1.0:
            raise ValueError("speed_prob must be a probability")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad speed range {self.speed_range}")
        if min(self.freq_masks, self.freq_width, self.time_masks) < 0 or self.time_width < 0:
            raise ValueError("mask counts and widths must be non-negative")


def speed_perturb(buf: AudioBuffer, cfg: AugmentConfig, rng: np.random.Generator,
                  rate: float | None = None) -> AudioBuffer:
    """Resample to ``round(L / rate)`` samples at the same nominal rate.

    Without a forced ``rate``, perturbs with probability ``cfg.speed_prob``;
    the unperturbed case returns ``buf`` itself.
    """
    if rate is None:
        if rng.random() >= cfg.speed_prob:
            return buf
        rate = rng.uniform(*cfg.speed_range)
    n_out = int(round(len(buf) / rate))
    return AudioBuffer(interp_to_length(buf.samples, n_out, rate), buf.sample_rate)


def max_time_mask(cfg: AugmentConfig, n_frames: int) -> int:
    return min(n_frames, math.ceil(round(cfg.time_width * n_frames, 9)))


def sample_masks(n_bins: int, n_frames: int, cfg: AugmentConfig,
                 rng: np.random.Generator) -> list[tuple[str, int, int]]:
    """Draw (axis, start, width) rectangles; axis is 'freq' or 'time'."""
    masks = []
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, min(cfg.freq_width, n_bins) + 1))
        masks.append(("freq", int(rng.integers(0, n_bins - w + 1)), w))
    tmax = max_time_mask(cfg, n_frames)
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, tmax + 1))
        masks.append(("time", int(rng.integers(0, n_frames - w + 1)), w))
    return masks


def apply_masks(F: FeatureMatrix, masks) -> FeatureMatrix:
    x = F.values.copy()
    for axis, start, width in masks:
        if axis == "freq":
            x[start : start + width, :] = 0.0
        else:
            x[:, start : start + width] = 0.0
    return FeatureMatrix(x)


def spec_augment(F: FeatureMatrix, cfg: AugmentConfig, rng: np.random.Generator) -> FeatureMatrix:
    return apply_masks(F, sample_masks(F.values.shape[0], F.n_frames, cfg, rng))
