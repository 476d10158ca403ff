"""Environment bank, scene/echo clip synthesis and split planning.

The dataset is built in two passes: :func:`build_splits` produces a cheap,
fully seeded plan of every clip (environment, SNR, events, noise
realisation, echo pairing), and :func:`render_clip` turns one plan entry into
audio and labels.  Rendering is deterministic per plan entry, so clips can be
rendered in any order or in parallel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.signal import oaconvolve

from .dry import N_CLASSES, N_VARIATIONS, DryBank
from .errors import ConfigError, MissingIRError, PolyphonyError
from .io import sha256_json
from .labels import LABEL_HOP, FrameEvents
from .spatial import (
    DEFAULT_MAX_ORDER,
    SAMPLE_RATE,
    EnvironmentSpec,
    ImpulseResponse,
    SourcePlacement,
    simulate_ir,
    simulate_noise,
)

AZIMUTHS = tuple(range(-180, 180, 10))
ELEVATIONS = (-20, 0, 20)
DISTANCES = (75, 150)
ECHO_PLACEMENT = SourcePlacement(0.0, 0.0, 150)

CLIP_LENGTH = 20.0
ECHO_LENGTH = 2.5
ECHO_ONSET = 0.25
MAX_POLYPHONY = 2

SUBSETS = ("Anechoic", "Reverb-S", "Test", "Echo", "Reverb-C")

# split name -> (IR subset, SNR policy, clip kind, clip count at full scale)
SPLIT_TABLE = {
    "Train-rev": ("Reverb-S", "random", "scene", 1920),
    "Train-anec": ("Anechoic", "clean", "scene", 1920),
    "Train-target": ("Test", "random", "scene", 1920),
    "Train-base": ("Reverb-C", "random", "scene", 1920),
    "Test": ("Test", "fixed", "scene", 300),
    "Train-echo-rev": ("Echo", "paired", "echo", 1920),
    "Train-echo-anec": ("Anechoic", "clean", "echo", 1),
    "Test-echo": ("Echo", "fixed", "echo", 5),
}
SPLIT_CODES = {name: i + 1 for i, name in enumerate(SPLIT_TABLE)}


def full_grid() -> List[SourcePlacement]:
    return [
        SourcePlacement(float(az), float(el), d)
        for d in DISTANCES
        for el in ELEVATIONS
        for az in AZIMUTHS
    ]


# ---------------------------------------------------------------- environments


@dataclass
class EnvironmentBank:
    envs: Dict[str, EnvironmentSpec]
    subsets: Dict[str, List[str]]
    placements: Dict[str, List[SourcePlacement]]
    seed: int = 0
    max_order: int = DEFAULT_MAX_ORDER
    sample_rate: int = SAMPLE_RATE
    _cache: dict = field(default_factory=dict, repr=False)

    def has_ir(self, env_id: str, placement: SourcePlacement) -> bool:
        if env_id not in self.envs:
            return False
        if placement == ECHO_PLACEMENT and env_id in self.subsets.get("Echo", ()):
            return True
        return placement in self.placements.get(env_id, ())

    def ir(self, env_id: str, placement: SourcePlacement) -> ImpulseResponse:
        if not self.has_ir(env_id, placement):
            raise MissingIRError(f"no IR for {env_id} at {placement}")
        key = (env_id, placement)
        if key not in self._cache:
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = simulate_ir(self.envs[env_id], placement, self.max_order, self.sample_rate)
        return self._cache[key]

    def echo_ir(self, env_id: str) -> ImpulseResponse:
        return self.ir(env_id, ECHO_PLACEMENT)

    def subset_irs(self, subset: str):
        """(env_id, placement) pairs making up one IR subset."""
        if subset == "Echo":
            return [(e, ECHO_PLACEMENT) for e in self.subsets["Echo"]]
        return [(e, p) for e in self.subsets[subset] for p in self.placements[e]]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "max_order": self.max_order,
            "sample_rate": self.sample_rate,
            "envs": {k: v.to_dict() for k, v in self.envs.items()},
            "subsets": {k: list(v) for k, v in self.subsets.items()},
            "placements": {k: [list(asdict(p).values()) for p in v] for k, v in self.placements.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentBank":
        return cls(
            envs={k: EnvironmentSpec.from_dict(v) for k, v in d["envs"].items()},
            subsets={k: list(v) for k, v in d["subsets"].items()},
            placements={k: [SourcePlacement(float(a), float(e), int(r)) for a, e, r in v] for k, v in d["placements"].items()},
            seed=d["seed"],
            max_order=d["max_order"],
            sample_rate=d["sample_rate"],
        )


def random_room(rng: np.random.Generator, env_id: str, noise_seed: int) -> EnvironmentSpec:
    """Shoebox room with the microphone placed so every grid source fits inside."""
    reach = max(DISTANCES) / 100.0
    dims = (rng.uniform(4.5, 10.0), rng.uniform(4.5, 10.0), rng.uniform(2.7, 4.0))
    margin = reach + 0.35
    vertical = reach * math.sin(math.radians(max(abs(e) for e in ELEVATIONS))) + 0.35
    mic = (
        rng.uniform(margin, dims[0] - margin),
        rng.uniform(margin, dims[1] - margin),
        rng.uniform(max(vertical, 0.9), dims[2] - max(vertical, 0.9)),
    )
    absorption = tuple(rng.uniform(0.1, 0.6, size=6))
    return EnvironmentSpec(env_id, dims, absorption, mic, noise_seed, is_anechoic=False)


def build_environment_bank(
    seed: int = 0,
    n_reverb_s: int = 96,
    n_test: int = 5,
    n_reverb_c: int = 2,
    n_sparse: int = 3,
    max_order: int = DEFAULT_MAX_ORDER,
    sample_rate: int = SAMPLE_RATE,
) -> EnvironmentBank:
    """Draw the five IR subsets (Anechoic, Reverb-S, Test, Echo, Reverb-C).

    Comprehensive subsets carry the full 216-point grid; every Reverb-S
    environment carries ``n_sparse`` random grid points; Echo holds one
    frontal 150 cm IR for every Reverb-S and Test environment.
    """
    grid = full_grid()
    if not 0 < n_sparse <= len(grid):
        raise ConfigError(f"n_sparse={n_sparse} must lie in [1, {len(grid)}]")
    if min(n_reverb_s, n_test, n_reverb_c) < 0:
        raise ConfigError("environment counts must be non-negative")
    rng = np.random.default_rng([seed, 0xB4])
    envs: Dict[str, EnvironmentSpec] = {}
    placements: Dict[str, List[SourcePlacement]] = {}
    subsets: Dict[str, List[str]] = {s: [] for s in SUBSETS}

    def noise_seed():
        return int(rng.integers(2**31))

    envs["anechoic"] = EnvironmentSpec("anechoic", noise_seed=noise_seed())
    placements["anechoic"] = list(grid)
    subsets["Anechoic"].append("anechoic")
    for prefix, subset, count in (("revS", "Reverb-S", n_reverb_s), ("test", "Test", n_test), ("revC", "Reverb-C", n_reverb_c)):
        for i in range(count):
            env_id = f"{prefix}-{i:03d}"
            envs[env_id] = random_room(rng, env_id, noise_seed())
            if subset == "Reverb-S":
                pick = rng.choice(len(grid), size=n_sparse, replace=False)
                placements[env_id] = [grid[j] for j in sorted(pick)]
            else:
                placements[env_id] = list(grid)
            subsets[subset].append(env_id)
    subsets["Echo"] = subsets["Reverb-S"] + subsets["Test"]
    return EnvironmentBank(envs, subsets, placements, seed, max_order, sample_rate)


# ---------------------------------------------------------------- events / clips


@dataclass
class EventInstance:
    class_id: int
    onset: float
    offset: float
    placement: SourcePlacement
    env_id: str
    variation_id: int = 0
    gain_db: float = 0.0

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "variation_id": self.variation_id,
            "onset": self.onset,
            "offset": self.offset,
            "azimuth": self.placement.azimuth,
            "elevation": self.placement.elevation,
            "distance": self.placement.distance,
            "env_id": self.env_id,
            "gain_db": self.gain_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventInstance":
        return cls(
            int(d["class_id"]), float(d["onset"]), float(d["offset"]),
            SourcePlacement(float(d["azimuth"]), float(d["elevation"]), int(d["distance"])),
            d["env_id"], int(d.get("variation_id", 0)), float(d.get("gain_db", 0.0)),
        )


@dataclass
class SceneClip:
    audio: np.ndarray
    events: List[EventInstance]
    snr_db: float
    split_name: str = ""
    clip_id: str = ""


@dataclass
class EchoClip:
    audio: np.ndarray
    env_id: str
    snr_db: float
    clip_id: str = ""


def max_overlap(intervals) -> int:
    """Largest number of half-open intervals [a, b) active at one instant."""
    points = sorted([(a, 1) for a, _ in intervals] + [(b, -1) for _, b in intervals], key=lambda p: (p[0], p[1]))
    best = cur = 0
    for _, step in points:
        cur += step
        best = max(best, cur)
    return best


def n_label_frames(clip_length: float, hop: float = LABEL_HOP) -> int:
    return int(round(clip_length / hop))


def frame_reference(events, clip_length: float, hop: float = LABEL_HOP) -> FrameEvents:
    """Label frames: an event is active where it covers >= 50 % of the frame."""
    ref = FrameEvents.empty(n_label_frames(clip_length, hop), hop)
    for ev in sorted(events, key=lambda e: (e.onset, e.class_id)):
        first = max(0, int(math.floor(ev.onset / hop)))
        last = min(len(ref) - 1, int(math.ceil(ev.offset / hop)))
        for t in range(first, last + 1):
            overlap = min(ev.offset, (t + 1) * hop) - max(ev.onset, t * hop)
            if overlap >= 0.5 * hop - 1e-9:
                ref.add(t, ev.class_id, ev.placement.unit_vector())
    return ref


def check_polyphony(events, clip_length: float, max_polyphony: int = MAX_POLYPHONY) -> None:
    for ev in events:
        if not (0.0 <= ev.onset < ev.offset <= clip_length + 1e-9):
            raise PolyphonyError(f"event [{ev.onset}, {ev.offset}] outside clip of {clip_length} s")
    if max_overlap([(e.onset, e.offset) for e in events]) > max_polyphony:
        raise PolyphonyError(f"more than {max_polyphony} simultaneous events")
    if events and frame_reference(events, clip_length).counts().max() > max_polyphony:
        raise PolyphonyError(f"a label frame carries more than {max_polyphony} events")


def _lookup_ir(irs, env_id, placement) -> ImpulseResponse:
    try:
        if hasattr(irs, "ir"):
            return irs.ir(env_id, placement)
        return irs[(env_id, placement)]
    except KeyError as exc:
        raise MissingIRError(f"no IR for {env_id} at {placement}") from exc


def _scale_noise(signal_w: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    e_sig = float(np.sum(signal_w.astype(np.float64) ** 2))
    e_noise = float(np.sum(noise[0].astype(np.float64) ** 2))
    if e_sig <= 0.0 or e_noise <= 0.0:
        return noise
    return noise * math.sqrt(e_sig / (e_noise * 10.0 ** (snr_db / 10.0)))


def synthesize_scene(
    events,
    irs,
    noise: Optional[np.ndarray],
    snr_db: float,
    dry_bank: DryBank,
    clip_length: float = CLIP_LENGTH,
    sample_rate: int = SAMPLE_RATE,
    split_name: str = "",
    clip_id: str = "",
):
    """Mix spatialised events plus scaled noise; return (SceneClip, FrameEvents).

    ``noise`` is ignored when ``snr_db`` is infinite (clean split) or absent.
    """
    events = list(events)
    check_polyphony(events, clip_length)
    n = int(round(clip_length * sample_rate))
    mix = np.zeros((4, n))
    for ev in events:
        ir = _lookup_ir(irs, ev.env_id, ev.placement)
        dry = dry_bank[ev.class_id, ev.variation_id].samples * 10.0 ** (ev.gain_db / 20.0)
        wet = oaconvolve(dry[None, :], ir.samples, axes=1)
        start = int(round(ev.onset * sample_rate))
        stop = min(n, start + wet.shape[1])
        mix[:, start:stop] += wet[:, : stop - start]
    if noise is not None and math.isfinite(snr_db):
        noise = np.asarray(noise)[:, :n]
        if noise.shape[1] < n:
            raise ConfigError("noise shorter than the clip")
        mix = mix + _scale_noise(mix[0], noise, snr_db) if events else mix + noise
    ref = frame_reference(events, clip_length)
    return SceneClip(mix.astype(np.float32), events, snr_db, split_name, clip_id), ref


def sweep_excitation(
    sample_rate: int = SAMPLE_RATE,
    duration: float = 0.02,
    f_start: float = 100.0,
    f_end: float = 8000.0,
    fade: float = 0.002,
) -> np.ndarray:
    """Exponential sine sweep with half-Hann fades at both ends."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rate = math.log(f_end / f_start)
    x = np.sin(2 * np.pi * f_start * duration / rate * (np.exp(t * rate / duration) - 1.0))
    nf = int(round(fade * sample_rate))
    ramp = np.hanning(2 * nf)
    x[:nf] *= ramp[:nf]
    x[-nf:] *= ramp[nf:]
    return x


def render_echo(
    ir: ImpulseResponse,
    noise: Optional[np.ndarray],
    snr_db: float,
    length: float = ECHO_LENGTH,
    onset: float = ECHO_ONSET,
    env_id: str = "",
    clip_id: str = "",
) -> EchoClip:
    sr = ir.sample_rate
    n = int(round(length * sr))
    response = oaconvolve(sweep_excitation(sr)[None, :], ir.samples, axes=1)
    audio = np.zeros((4, n))
    start = int(round(onset * sr))
    stop = min(n, start + response.shape[1])
    audio[:, start:stop] = response[:, : stop - start]
    if noise is not None and math.isfinite(snr_db):
        audio = audio + _scale_noise(audio[0], np.asarray(noise)[:, :n], snr_db)
    return EchoClip(audio.astype(np.float32), env_id or ir.env_id, snr_db, clip_id)


def synthesize_echo(bank: EnvironmentBank, env_id: str, snr_db: float, realization: int = 0,
                    clip_id: str = "") -> EchoClip:
    """Swept-sine echo observation for one environment at ``snr_db``."""
    ir = bank.echo_ir(env_id)
    noise = None
    if math.isfinite(snr_db):
        noise = simulate_noise(bank.envs[env_id], ECHO_LENGTH, bank.sample_rate, realization)
    return render_echo(ir, noise, snr_db, env_id=env_id, clip_id=clip_id)


# ---------------------------------------------------------------- split planning


@dataclass
class DatasetConfig:
    scale: float = 1.0 / 16
    seed: int = 0
    splits: Optional[List[str]] = None
    snr_range: tuple = (6.0, 30.0)
    test_snr: float = 20.0
    events_per_clip: tuple = (8, 14)
    clip_length: float = CLIP_LENGTH
    n_reverb_s: int = 96
    n_test: int = 5
    n_reverb_c: int = 2
    n_sparse: int = 3
    max_order: int = DEFAULT_MAX_ORDER
    counts: Optional[Dict[str, int]] = None

    @classmethod
    def paper_scale(cls, **kw) -> "DatasetConfig":
        return cls(scale=1.0, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range"] = list(self.snr_range)
        d["events_per_clip"] = list(self.events_per_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        for k in ("snr_range", "events_per_clip"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def bank_kwargs(self) -> dict:
        return dict(seed=self.seed, n_reverb_s=self.n_reverb_s, n_test=self.n_test,
                    n_reverb_c=self.n_reverb_c, n_sparse=self.n_sparse, max_order=self.max_order)

    def split_count(self, name: str) -> int:
        if self.counts and name in self.counts:
            return int(self.counts[name])
        full = SPLIT_TABLE[name][3]
        if name == "Train-echo-anec":
            return 1
        if name == "Test-echo":
            return self.n_test
        if name == "Train-echo-rev":
            return self.split_count("Train-rev")
        if name == "Test":
            return max(self.n_test, int(round(full * self.scale)))
        return max(1, int(round(full * self.scale)))


@dataclass
class ClipPlan:
    clip_id: str
    split: str
    kind: str
    env_id: str
    snr_db: Optional[float]  # None = clean
    noise_realization: int
    seed: list
    events: List[EventInstance] = field(default_factory=list)
    pair: Optional[str] = None

    @property
    def snr(self) -> float:
        return math.inf if self.snr_db is None else float(self.snr_db)

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "split": self.split,
            "kind": self.kind,
            "env_id": self.env_id,
            "snr_db": self.snr_db,
            "noise_realization": self.noise_realization,
            "seed": list(self.seed),
            "events": [e.to_dict() for e in self.events],
            "pair": self.pair,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClipPlan":
        return cls(
            d["clip_id"], d["split"], d["kind"], d["env_id"], d["snr_db"], int(d["noise_realization"]),
            list(d["seed"]), [EventInstance.from_dict(e) for e in d["events"]], d.get("pair"),
        )


def sample_events(rng, env_id, placements, dry_bank: DryBank, clip_length=CLIP_LENGTH,
                  n_range=(8, 14), max_polyphony=MAX_POLYPHONY, sample_rate=SAMPLE_RATE, max_tries=30):
    """Random stationary events, rejecting draws that break the polyphony limit.

    Overlapping instances of the same class are also rejected so that the
    per-class training targets stay unambiguous.
    """
    n_target = int(rng.integers(n_range[0], n_range[1] + 1))
    events: List[EventInstance] = []
    for _ in range(n_target):
        for _ in range(max_tries):
            c = int(rng.integers(N_CLASSES))
            v = int(rng.integers(N_VARIATIONS))
            dur = dry_bank[c, v].duration
            onset = round(float(rng.uniform(0.0, clip_length - dur)) * sample_rate) / sample_rate
            p = placements[int(rng.integers(len(placements)))]
            cand = EventInstance(c, onset, onset + dur, p, env_id, v, float(rng.uniform(-6.0, 0.0)))
            same = [e for e in events if e.class_id == c]
            if max_overlap([(e.onset, e.offset) for e in same + [cand]]) > 1:
                continue
            try:
                check_polyphony(events + [cand], clip_length, max_polyphony)
            except PolyphonyError:
                continue
            events.append(cand)
            break
    return sorted(events, key=lambda e: e.onset)


def build_splits(config: DatasetConfig, bank: EnvironmentBank, dry_bank: Optional[DryBank] = None) -> dict:
    """Plan every clip of the requested splits; returns the dataset manifest."""
    if not 0 < config.scale <= 1.0:
        raise ConfigError(f"scale must lie in (0, 1], got {config.scale}")
    dry_bank = dry_bank or DryBank(config.seed)
    names = list(config.splits or SPLIT_TABLE)
    for name in names:
        if name not in SPLIT_TABLE:
            raise ConfigError(f"unknown split {name!r}; available: {', '.join(SPLIT_TABLE)}")
    if "Train-echo-rev" in names and "Train-rev" not in names:
        names.insert(names.index("Train-echo-rev"), "Train-rev")
    if "Train-echo-rev" in names and config.split_count("Train-echo-rev") != config.split_count("Train-rev"):
        raise ConfigError("Train-echo-rev must have exactly as many clips as Train-rev")
    if "Test-echo" in names and config.split_count("Test-echo") != len(bank.subsets["Test"]):
        raise ConfigError("Test-echo needs exactly one clip per Test environment")
    lo, hi = config.snr_range
    plans: Dict[str, List[ClipPlan]] = {}
    for name in sorted(names, key=lambda s: SPLIT_TABLE[s][2] == "echo"):
        subset, snr_policy, kind, _ = SPLIT_TABLE[name]
        code = SPLIT_CODES[name]
        count = config.split_count(name)
        env_pool = bank.subsets["Test"] if name == "Test-echo" else bank.subsets[subset]
        if not env_pool:
            raise ConfigError(f"split {name} needs environments from subset {subset}, which is empty")
        order_rng = np.random.default_rng([config.seed, code, 0xE1])
        env_order = list(order_rng.permutation(env_pool)) if len(env_pool) > 1 else list(env_pool)
        out = []
        for i in range(count):
            seed = [config.seed, code, i]
            rng = np.random.default_rng(seed)
            clip_id = f"{name}/{i:05d}"
            if snr_policy == "paired":
                src = plans["Train-rev"][i]
                env_id, snr = src.env_id, src.snr_db
                src.pair = clip_id
                pair = src.clip_id
            else:
                env_id = env_order[i % len(env_order)] if name != "Test-echo" else env_pool[i]
                snr = {"random": None, "clean": None, "fixed": config.test_snr}[snr_policy]
                if snr_policy == "random":
                    snr = round(float(rng.uniform(lo, hi)), 3)
                pair = None
            plan = ClipPlan(clip_id, name, kind, env_id, snr, code * 1_000_000 + i, seed, pair=pair)
            if kind == "scene":
                plan.events = sample_events(rng, env_id, bank.placements[env_id], dry_bank,
                                            config.clip_length, config.events_per_clip)
            out.append(plan)
        plans[name] = out
    # scene <-> echo pairing for the anechoic and test splits
    if "Train-echo-anec" in plans and "Train-anec" in plans:
        for p in plans["Train-anec"]:
            p.pair = plans["Train-echo-anec"][0].clip_id
    if "Test-echo" in plans and "Test" in plans:
        by_env = {p.env_id: p.clip_id for p in plans["Test-echo"]}
        for p in plans["Test"]:
            p.pair = by_env[p.env_id]
    manifest = {
        "format_version": 1,
        "sample_rate": bank.sample_rate,
        "config": config.to_dict(),
        "bank": bank.to_dict(),
        "feature_layout": ["channels", "frames", "mels"],
        "splits": {name: [p.to_dict() for p in plans[name]] for name in SPLIT_TABLE if name in plans},
    }
    manifest["plan_sha256"] = sha256_json({k: manifest[k] for k in ("config", "bank", "splits")})
    return manifest


def manifest_plans(manifest: dict, split: str) -> List[ClipPlan]:
    if split not in manifest["splits"]:
        raise ConfigError(f"unknown split {split!r}; available: {', '.join(manifest['splits'])}")
    return [ClipPlan.from_dict(d) for d in manifest["splits"][split]]


def render_clip(plan: ClipPlan, bank: EnvironmentBank, dry_bank: DryBank, clip_length: float = CLIP_LENGTH):
    """Audio (and labels for scenes) for one planned clip.

    Returns ``(SceneClip, FrameEvents)`` for scene clips and ``(EchoClip,
    None)`` for echo clips.
    """
    env = bank.envs[plan.env_id]
    if plan.kind == "echo":
        return synthesize_echo(bank, plan.env_id, plan.snr, plan.noise_realization, plan.clip_id), None
    noise = None
    if plan.snr_db is not None:
        noise = simulate_noise(env, clip_length, bank.sample_rate, plan.noise_realization)
    return synthesize_scene(plan.events, bank, noise, plan.snr, dry_bank, clip_length,
                            bank.sample_rate, plan.split, plan.clip_id)
