"""First-order ambisonic impulse responses and ambient noise for virtual rooms.

Conventions: ACN channel order (W, Y, Z, X) with SN3D normalisation.  Azimuth
is measured counter-clockwise from +x in the horizontal plane, elevation
upwards from it; both in degrees.  Room coordinates have a corner at the
origin and walls are ordered (x0, x1, y0, y1, z0, z1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.spatial.transform import Rotation

from .errors import ConfigError, GeometryError

SAMPLE_RATE = 48000
SPEED_OF_SOUND = 343.0
SINC_TAPS = 64
DEFAULT_MAX_ORDER = 6
N_NOISE_STREAMS = 24


@dataclass
class EnvironmentSpec:
    env_id: str
    room_dims: Optional[tuple] = None
    absorption: tuple = (1.0,) * 6
    mic_position: tuple = (0.0, 0.0, 0.0)
    noise_seed: int = 0
    is_anechoic: bool = True

    def __post_init__(self):
        self.absorption = tuple(float(a) for a in self.absorption)
        self.mic_position = tuple(float(m) for m in self.mic_position)
        if len(self.absorption) != 6:
            raise ConfigError(f"{self.env_id}: need 6 wall absorption coefficients")
        if any(not (0.0 < a <= 1.0) for a in self.absorption):
            raise ConfigError(f"{self.env_id}: absorption must lie in (0, 1]")
        if self.is_anechoic:
            return
        if self.room_dims is None:
            raise ConfigError(f"{self.env_id}: reverberant environment needs room_dims")
        self.room_dims = tuple(float(d) for d in self.room_dims)
        dims = np.asarray(self.room_dims)
        mic = np.asarray(self.mic_position)
        if np.any(dims <= 1.0):
            raise ConfigError(f"{self.env_id}: room dimensions must exceed 1 m")
        if np.any(mic < 0.3) or np.any(dims - mic < 0.3):
            raise ConfigError(f"{self.env_id}: microphone closer than 0.3 m to a wall")

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "room_dims": list(self.room_dims) if self.room_dims is not None else None,
            "absorption": list(self.absorption),
            "mic_position": list(self.mic_position),
            "noise_seed": int(self.noise_seed),
            "is_anechoic": bool(self.is_anechoic),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        return cls(
            env_id=d["env_id"],
            room_dims=tuple(d["room_dims"]) if d.get("room_dims") is not None else None,
            absorption=tuple(d["absorption"]),
            mic_position=tuple(d["mic_position"]),
            noise_seed=int(d["noise_seed"]),
            is_anechoic=bool(d["is_anechoic"]),
        )


@dataclass(frozen=True, order=True)
class SourcePlacement:
    azimuth: float
    elevation: float
    distance: int  # cm

    def unit_vector(self) -> np.ndarray:
        return direction_vector(self.azimuth, self.elevation)

    def offset(self) -> np.ndarray:
        """Source position relative to the microphone, in metres."""
        return self.unit_vector() * (self.distance / 100.0)

    def tag(self) -> str:
        return f"az{int(round(self.azimuth)):+04d}_el{int(round(self.elevation)):+03d}_d{int(self.distance):03d}"


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int
    placement: SourcePlacement
    env_id: str
    extras: dict = field(default_factory=dict)


def wrap_azimuth(azimuth: float) -> float:
    return (float(azimuth) + 180.0) % 360.0 - 180.0


def direction_vector(azimuth, elevation) -> np.ndarray:
    az = np.deg2rad(azimuth)
    el = np.deg2rad(elevation)
    return np.stack(
        [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el) * np.ones_like(az)], axis=-1
    )


def vector_to_angles(v) -> tuple:
    """Cartesian direction -> (azimuth, elevation) in degrees."""
    v = np.asarray(v, dtype=float)
    az = np.rad2deg(np.arctan2(v[..., 1], v[..., 0]))
    el = np.rad2deg(np.arctan2(v[..., 2], np.hypot(v[..., 0], v[..., 1])))
    return az, el


def foa_gains(azimuth: float, elevation: float) -> np.ndarray:
    """SN3D plane-wave encoding gains in ACN order (W, Y, Z, X)."""
    az = np.deg2rad(wrap_azimuth(azimuth))
    el = np.deg2rad(np.clip(elevation, -90.0, 90.0))
    return np.array([1.0, np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])


def _foa_gains_from_vectors(u: np.ndarray) -> np.ndarray:
    """Encoding gains for unit row-vectors u (N, 3) -> (4, N)."""
    return np.stack([np.ones(len(u)), u[:, 1], u[:, 2], u[:, 0]])


def _axis_images(k: np.ndarray, s: float, length: float, beta_near: float, beta_far: float):
    """Image coordinate and reflection gain along one axis for lattice index k."""
    k = np.asarray(k)
    even = k % 2 == 0
    pos = np.where(even, k * length + s, (k + 1) * length - s)
    ak = np.abs(k)
    n_far = np.where(even, ak // 2, np.where(k > 0, (ak + 1) // 2, (ak - 1) // 2))
    n_near = ak - n_far
    gain = np.power(beta_near, n_near) * np.power(beta_far, n_far)
    return pos, gain


def lattice_indices(max_order: int) -> np.ndarray:
    """All integer triples with |k1| + |k2| + |k3| <= max_order."""
    r = np.arange(-max_order, max_order + 1)
    k = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    k = k[np.abs(k).sum(axis=1) <= max_order]
    # direct path first
    order = np.argsort(np.abs(k).sum(axis=1), kind="stable")
    return k[order]


def source_position(env: EnvironmentSpec, placement: SourcePlacement) -> np.ndarray:
    return np.asarray(env.mic_position) + placement.offset()


def image_sources(env: EnvironmentSpec, placement: SourcePlacement, max_order: int = DEFAULT_MAX_ORDER):
    """Image-source positions and reflection gains for a shoebox room.

    Returns ``(positions (N, 3), gains (N,), orders (N,))``.  Anechoic
    environments yield the direct path only.
    """
    if max_order < 0:
        raise ConfigError("max_order must be >= 0")
    if placement.distance <= 0:
        raise GeometryError("source coincides with the microphone")
    src = source_position(env, placement)
    if env.is_anechoic:
        return src[None, :], np.ones(1), np.zeros(1, dtype=int)
    dims = np.asarray(env.room_dims)
    if np.any(src <= 0.0) or np.any(src >= dims):
        raise GeometryError(f"source {src.round(3).tolist()} outside room {env.room_dims} ({env.env_id})")
    beta = np.sqrt(1.0 - np.asarray(env.absorption))
    k = lattice_indices(max_order)
    pos = np.empty((len(k), 3))
    gain = np.ones(len(k))
    for axis in range(3):
        p, g = _axis_images(k[:, axis], src[axis], dims[axis], beta[2 * axis], beta[2 * axis + 1])
        pos[:, axis] = p
        gain *= g
    return pos, gain, np.abs(k).sum(axis=1)


def fractional_delay_taps(delay: np.ndarray, taps: int = SINC_TAPS):
    """Hann-windowed sinc kernels for (possibly fractional) sample delays.

    Returns ``(start_index (N,), kernels (N, taps))``; kernel j of row i lands
    on sample ``start[i] + j``.
    """
    delay = np.atleast_1d(np.asarray(delay, dtype=float))
    half = taps // 2
    start = np.floor(delay).astype(int) - half + 1
    n = start[:, None] + np.arange(taps)[None, :]
    t = n - delay[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / half))
    window[np.abs(t) > half] = 0.0
    return start, np.sinc(t) * window


def simulate_ir(
    env: EnvironmentSpec,
    placement: SourcePlacement,
    max_order: int = DEFAULT_MAX_ORDER,
    sample_rate: int = SAMPLE_RATE,
    c: float = SPEED_OF_SOUND,
) -> ImpulseResponse:
    """FOA impulse response from the image-source model.

    Every image contributes a windowed-sinc impulse delayed by d / c, scaled
    by its reflection-gain product over d and panned by the FOA gains of its
    direction as seen from the microphone.
    """
    pos, gain, _ = image_sources(env, placement, max_order)
    mic = np.asarray(env.mic_position)
    rel = pos - mic
    dist = np.linalg.norm(rel, axis=1)
    if np.any(dist < 1e-6):
        raise GeometryError("source coincides with the microphone")
    keep = gain > 0.0
    rel, dist, gain = rel[keep], dist[keep], gain[keep]
    delay = dist * sample_rate / c
    start, kernels = fractional_delay_taps(delay)
    if start.min() < 0:
        raise GeometryError("source too close to the microphone for the delay kernel")
    length = int(start.max()) + SINC_TAPS + 1
    amps = gain / dist
    panning = _foa_gains_from_vectors(rel / dist[:, None])  # (4, N)
    idx = (start[:, None] + np.arange(SINC_TAPS)[None, :]).ravel()
    mono_rows = (kernels * amps[:, None])  # (N, taps)
    out = np.zeros((4, length))
    for ch in range(4):
        np.add.at(out[ch], idx, (mono_rows * panning[ch][:, None]).ravel())
    return ImpulseResponse(out, sample_rate, placement, env.env_id, {"n_images": int(len(dist))})


def _fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + 5 ** 0.5) * k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum."""
    n_bins = n // 2 + 1
    spec = rng.standard_normal(n_bins) + 1j * rng.standard_normal(n_bins)
    f = np.arange(n_bins, dtype=float)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (x.std() + 1e-12)


def noise_directions(rng: np.random.Generator, n: int = N_NOISE_STREAMS) -> np.ndarray:
    """Near-uniform directions: a Fibonacci sphere under a random rotation."""
    rot = Rotation.random(random_state=int(rng.integers(2**31)))
    return rot.apply(_fibonacci_sphere(n))


def simulate_noise(
    env: EnvironmentSpec,
    duration: float,
    sample_rate: int = SAMPLE_RATE,
    realization: int = 0,
    transient_rate: float = 0.1,
) -> np.ndarray:
    """Diffuse pink ambient noise plus sparse band-limited bursts, (4, T).

    Deterministic in ``(env.noise_seed, realization)``; scaled to unit
    variance on W.
    """
    if duration <= 0:
        raise ConfigError("noise duration must be positive")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng([int(env.noise_seed), int(realization)])
    dirs = noise_directions(rng)
    gains = _foa_gains_from_vectors(dirs)
    out = np.zeros((4, n))
    for i in range(len(dirs)):
        out += gains[:, i : i + 1] * pink_noise(n, rng)[None, :]
    out /= out[0].std() + 1e-12

    n_bursts = rng.poisson(transient_rate * duration)
    for _ in range(n_bursts):
        blen = int(rng.uniform(0.03, 0.2) * sample_rate)
        if blen >= n:
            continue
        fc = rng.uniform(300.0, 4000.0)
        sos = signal.butter(2, [fc / 1.5, min(fc * 1.5, 0.45 * sample_rate)], btype="band", fs=sample_rate, output="sos")
        burst = signal.sosfilt(sos, rng.standard_normal(blen)) * np.hanning(blen)
        burst *= rng.uniform(0.5, 2.0) / (np.sqrt(np.mean(burst**2)) + 1e-12)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        at = int(rng.integers(0, n - blen))
        out[:, at : at + blen] += _foa_gains_from_vectors(u[None, :]) * burst[None, :]
    out /= out[0].std() + 1e-12
    return out


def mirrored_positions(room_dims: Sequence[float], src: Sequence[float], max_order: int) -> set:
    """Distinct image positions reachable by at most ``max_order`` wall mirrorings.

    Plain breadth-first search over explicit reflections; used as an
    independent check on the lattice enumeration.
    """
    dims = np.asarray(room_dims, dtype=float)
    start = tuple(np.round(np.asarray(src, dtype=float), 9))
    seen = {start}
    frontier = {start}
    for _ in range(max_order):
        nxt = set()
        for p in frontier:
            for axis in range(3):
                for wall in (0.0, dims[axis]):
                    q = list(p)
                    q[axis] = round(2 * wall - q[axis], 9)
                    q = tuple(q)
                    if q not in seen:
                        nxt.add(q)
        seen |= nxt
        frontier = nxt
    return seen
