"""Log-mel and mel-banded intensity-vector features for FOA audio.

A feature map has 7 channels: log-mel power of W, Y, Z, X followed by the
normalised active intensity (x, y, z).  Frames are taken without centre
padding, so ``T = (N - window) // hop + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .errors import InputTooShort, MissingStats
from .spatial import SAMPLE_RATE

N_MELS = 64
MEL_FMIN = 50.0
LOG_FLOOR = 1e-8
INTENSITY_EPS = 1e-8
STD_FLOOR = 1e-6

# (window, hop) per feature kind
FRAME_PARAMS = {"scene": (2048, 960), "echo": (1024, 512)}


@dataclass
class FeatureMap:
    values: np.ndarray  # (7, T, 64)
    frame_rate: float
    kind: str

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_fft: int, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS,
                   fmin: float = MEL_FMIN, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filters with unit peak, shape (n_mels, n_fft // 2 + 1).

    Bands too narrow to contain an FFT bin fall back to the nearest bin so
    that no band is identically empty.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
        if not fb[m].any():
            fb[m, np.argmin(np.abs(freqs - mid))] = 1.0
    fb.setflags(write=False)
    return fb


def _check_kind(kind: str):
    if kind not in FRAME_PARAMS:
        raise ValueError(f"unknown feature kind {kind!r}; expected one of {sorted(FRAME_PARAMS)}")
    return FRAME_PARAMS[kind]


def n_frames(n_samples: int, kind: str) -> int:
    window, hop = _check_kind(kind)
    return (n_samples - window) // hop + 1


def stft(audio: np.ndarray, kind: str) -> np.ndarray:
    """Hann-windowed STFT of each channel, (C, T, window // 2 + 1) complex."""
    window, hop = _check_kind(kind)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.shape[-1] < window:
        raise InputTooShort(f"{audio.shape[-1]} samples is shorter than the {window}-point window")
    frames = np.lib.stride_tricks.sliding_window_view(audio, window, axis=-1)[..., ::hop, :]
    return np.fft.rfft(frames * get_window("hann", window), axis=-1)


def logmel_from_stft(spec: np.ndarray) -> np.ndarray:
    n_fft = 2 * (spec.shape[-1] - 1)
    fb = mel_filterbank(n_fft)
    power = spec.real**2 + spec.imag**2
    return np.log(power @ fb.T + LOG_FLOOR)


def stft_logmel(audio: np.ndarray, kind: str) -> np.ndarray:
    """(4, N) FOA audio -> (4, T, 64) log-mel power."""
    return logmel_from_stft(stft(audio, kind))


def intensity_vector(spec: np.ndarray) -> np.ndarray:
    """Mel-banded active intensity (x, y, z) from an ACN-ordered FOA STFT.

    Each band is divided by its mel-weighted energy density
    (|W|^2 + |X|^2 + |Y|^2 + |Z|^2) / 2, which bounds the result to the unit
    ball and makes a single plane wave read back its unit direction.
    """
    n_fft = 2 * (spec.shape[-1] - 1)
    fb = mel_filterbank(n_fft)
    w = spec[0]
    velocity = spec[[3, 1, 2]]  # X, Y, Z
    active = np.real(np.conj(w)[None] * velocity)
    energy = 0.5 * (np.abs(w) ** 2 + np.sum(np.abs(velocity) ** 2, axis=0))
    return (active @ fb.T) / (energy @ fb.T + INTENSITY_EPS)[None]


def extract_features(audio: np.ndarray, kind: str, sample_rate: int = SAMPLE_RATE) -> FeatureMap:
    spec = stft(audio, kind)
    values = np.concatenate([logmel_from_stft(spec), intensity_vector(spec)], axis=0)
    hop = FRAME_PARAMS[kind][1]
    return FeatureMap(values.astype(np.float32), sample_rate / hop, kind)


@dataclass
class FeatureStats:
    """Per (channel, mel band) standardisation for the log-mel channels."""

    mean: np.ndarray  # (4, 64)
    std: np.ndarray  # (4, 64)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_stats(feature_maps) -> FeatureStats:
    """Accumulate mean/std over frames of many (7, T, 64) arrays."""
    total = None
    total_sq = None
    count = 0
    for fm in feature_maps:
        v = np.asarray(getattr(fm, "values", fm), dtype=np.float64)[:4]
        if total is None:
            total = np.zeros(v.shape[::2])
            total_sq = np.zeros(v.shape[::2])
        total += v.sum(axis=1)
        total_sq += (v**2).sum(axis=1)
        count += v.shape[1]
    if count == 0:
        raise MissingStats("no feature maps to compute statistics from")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return FeatureStats(mean, np.maximum(np.sqrt(var), STD_FLOOR))


def normalize(features, stats: FeatureStats | None):
    """Standardise log-mel channels; intensity channels pass through."""
    if stats is None:
        raise MissingStats("normalisation statistics are required")
    values = np.asarray(getattr(features, "values", features))
    out = values.astype(np.float32, copy=True)
    out[:4] = (values[:4] - stats.mean[:, None, :]) / np.maximum(stats.std, STD_FLOOR)[:, None, :]
    if isinstance(features, FeatureMap):
        return FeatureMap(out, features.frame_rate, features.kind)
    return out
