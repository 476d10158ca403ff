"""Procedural dry sound events: 12 classes x 20 variations.

Each class is a parametric template drawn from one of five families
(tonal, chirp, noise burst, amplitude modulated, impact train).  Variations
re-draw the template parameters from a class-specific range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .spatial import SAMPLE_RATE

N_CLASSES = 12
N_VARIATIONS = 20
MIN_DURATION = 0.3
MAX_DURATION = 4.0

CLASS_NAMES = (
    "hum", "whistle", "rise", "fall", "rumble", "hiss",
    "siren", "engine", "knock", "bell", "vibrato", "swoosh",
)


@dataclass
class DrySource:
    class_id: int
    variation_id: int
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _envelope(n, attack, release, sr):
    env = np.ones(n)
    a = min(int(attack * sr), n // 2)
    r = min(int(release * sr), n // 2)
    if a:
        env[:a] = np.linspace(0.0, 1.0, a)
    if r:
        env[-r:] = np.linspace(1.0, 0.0, r)
    return env


def _harmonics(t, f0, n_harm, rolloff, rng):
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    return sum(rolloff**h * np.sin(2 * np.pi * f0 * (h + 1) * t + phases[h]) for h in range(n_harm))


def _band_noise(n, lo, hi, sr, rng):
    sos = signal.butter(4, [lo, min(hi, 0.45 * sr)], btype="band", fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _chirp(t, f_start, f_end):
    return signal.chirp(t, f0=f_start, f1=f_end, t1=t[-1], method="logarithmic")


def _render(class_id: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    dur = rng.uniform(0.4, 3.0)
    n = int(dur * sr)
    t = np.arange(n) / sr
    if class_id == 0:  # low harmonic hum
        x = _harmonics(t, rng.uniform(80, 160), 8, 0.7, rng)
    elif class_id == 1:  # high whistle
        x = _harmonics(t, rng.uniform(1500, 3000), 2, 0.3, rng)
    elif class_id == 2:
        x = _chirp(t, rng.uniform(200, 500), rng.uniform(2000, 6000))
    elif class_id == 3:
        x = _chirp(t, rng.uniform(3000, 7000), rng.uniform(200, 600))
    elif class_id == 4:
        x = _band_noise(n, 60, rng.uniform(300, 600), sr, rng)
    elif class_id == 5:
        x = _band_noise(n, rng.uniform(4000, 6000), rng.uniform(10000, 16000), sr, rng)
    elif class_id == 6:  # two-tone siren: AM-switched carrier
        f1 = rng.uniform(600, 900)
        rate = rng.uniform(1.5, 4.0)
        f_inst = f1 * (1.0 + 0.3 * (signal.square(2 * np.pi * rate * t) > 0))
        x = np.sin(2 * np.pi * np.cumsum(f_inst) / sr)
    elif class_id == 7:  # amplitude-modulated broadband noise
        am = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(15, 40) * t))
        x = am * _band_noise(n, 100, rng.uniform(1500, 3000), sr, rng)
    elif class_id == 8:  # knock train of short clicks
        x = np.zeros(n)
        period = int(rng.uniform(0.08, 0.25) * sr)
        click = _band_noise(int(0.01 * sr), 300, 3000, sr, rng) * np.hanning(int(0.01 * sr))
        for start in range(0, n - len(click), period):
            x[start : start + len(click)] += click
    elif class_id == 9:  # bell strikes: decaying inharmonic partials
        x = np.zeros(n)
        f0 = rng.uniform(400, 1200)
        period = int(rng.uniform(0.3, 0.8) * sr)
        tt = np.arange(min(period, n)) / sr
        strike = sum(np.exp(-tt * (6 + 3 * k)) * np.sin(2 * np.pi * f0 * r * tt) for k, r in enumerate((1.0, 2.76, 5.4)))
        for start in range(0, n, period):
            seg = strike[: n - start]
            x[start : start + len(seg)] += seg
    elif class_id == 10:  # vibrato tone
        f0 = rng.uniform(300, 800)
        vib = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(4, 8) * t)
        x = np.sin(2 * np.pi * np.cumsum(f0 * vib) / sr) + 0.4 * np.sin(4 * np.pi * np.cumsum(f0 * vib) / sr)
    elif class_id == 11:  # swoosh: noise with a sweeping band
        centre = np.geomspace(rng.uniform(300, 800), rng.uniform(3000, 8000), n)
        noise = rng.standard_normal(n)
        x = np.zeros(n)
        blocks = np.array_split(np.arange(n), 16)
        for b in blocks:
            fc = centre[b[len(b) // 2]]
            sos = signal.butter(2, [fc / 1.4, fc * 1.4], btype="band", fs=sr, output="sos")
            x[b] = signal.sosfilt(sos, noise[b])
        x *= np.hanning(n)
    else:
        raise ValueError(f"class_id {class_id} out of range")
    x = x * _envelope(n, 0.01, 0.05, sr)
    peak = np.max(np.abs(x))
    return x / peak if peak > 0 else x


def make_dry_source(class_id: int, variation_id: int, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> DrySource:
    if not (0 <= class_id < N_CLASSES and 0 <= variation_id < N_VARIATIONS):
        raise ValueError(f"no dry source ({class_id}, {variation_id})")
    rng = np.random.default_rng([seed, class_id, variation_id])
    return DrySource(class_id, variation_id, _render(class_id, rng, sample_rate), sample_rate)


class DryBank:
    """Lazily rendered, cached 12 x 20 dry-source library."""

    def __init__(self, seed: int = 0, sample_rate: int = SAMPLE_RATE):
        self.seed = seed
        self.sample_rate = sample_rate
        self._cache = {}

    def __getitem__(self, key) -> DrySource:
        if key not in self._cache:
            self._cache[key] = make_dry_source(key[0], key[1], self.seed, self.sample_rate)
        return self._cache[key]

    def __len__(self):
        return N_CLASSES * N_VARIATIONS

    def __iter__(self):
        for c in range(N_CLASSES):
            for v in range(N_VARIATIONS):
                yield self[c, v]
