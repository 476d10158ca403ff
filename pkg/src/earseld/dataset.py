"""Manifest-driven dataset access: synthesis to disk, audio, labels and features.

Layout under a dataset root::

    manifest.json
    irs/<env_id>/az+000_el+00_d150.wav
    audio/<split>/<index>.wav
    labels/<split>/<index>.csv
    features/<split>/<index>.npy      (optional cache, (channels, frames, mels))
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .dry import DryBank
from .errors import ConfigError
from .features import FeatureStats, compute_stats, extract_features, normalize
from .io import read_json, read_label_csv, read_wav, sha256_file, write_json, write_label_csv, write_wav
from .labels import FrameEvents
from .model import crop_echo_frames
from .scenes import (
    SPLIT_TABLE,
    ClipPlan,
    DatasetConfig,
    EnvironmentBank,
    build_environment_bank,
    build_splits,
    frame_reference,
    manifest_plans,
    n_label_frames,
    render_clip,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _clip_paths(root: Path, clip_id: str):
    split, idx = clip_id.split("/")
    return root / "audio" / split / f"{idx}.wav", root / "labels" / split / f"{idx}.csv"


class Dataset:
    """A planned dataset, optionally backed by files on disk.

    Without a root, audio is rendered on demand from the plan (deterministic),
    which is what the in-memory experiments use.
    """

    def __init__(self, manifest: dict, root=None, cache_features: bool = True):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self.config = DatasetConfig.from_dict(manifest["config"])
        self.bank = EnvironmentBank.from_dict(manifest["bank"])
        self.dry = DryBank(self.config.seed, self.bank.sample_rate)
        self.cache_features = cache_features and self.root is not None

    @classmethod
    def plan(cls, config: DatasetConfig) -> "Dataset":
        bank = build_environment_bank(**config.bank_kwargs())
        return cls(build_splits(config, bank, DryBank(config.seed)))

    @classmethod
    def open(cls, root) -> "Dataset":
        path = Path(root) / MANIFEST_NAME
        if not path.exists():
            raise ConfigError(f"no dataset manifest at {path}; run `earseld synth` first")
        return cls(read_json(path), root)

    @property
    def splits(self) -> List[str]:
        return list(self.manifest["splits"])

    def require(self, *splits: str) -> None:
        missing = [s for s in splits if s not in self.manifest["splits"]]
        if missing:
            raise ConfigError(
                f"dataset lacks split(s) {', '.join(missing)}; available: {', '.join(self.splits)}"
            )

    def plans(self, split: str) -> List[ClipPlan]:
        return manifest_plans(self.manifest, split)

    def plan_by_id(self, clip_id: str) -> ClipPlan:
        split = clip_id.split("/")[0]
        for p in self.plans(split):
            if p.clip_id == clip_id:
                return p
        raise KeyError(clip_id)

    def audio(self, plan: ClipPlan) -> np.ndarray:
        if self.root is not None:
            wav, _ = _clip_paths(self.root, plan.clip_id)
            if wav.exists():
                return read_wav(wav)[0]
        clip, _ = render_clip(plan, self.bank, self.dry, self.config.clip_length)
        return clip.audio

    def reference(self, plan: ClipPlan) -> FrameEvents:
        n = n_label_frames(self.config.clip_length)
        if self.root is not None:
            _, csv_path = _clip_paths(self.root, plan.clip_id)
            if csv_path.exists():
                return FrameEvents.from_rows(read_label_csv(csv_path), n)
        return frame_reference(plan.events, self.config.clip_length)

    def features(self, plan: ClipPlan) -> np.ndarray:
        """Raw (un-normalised) (7, T, 64) features, cached on disk when possible."""
        cache = None
        if self.cache_features:
            split, idx = plan.clip_id.split("/")
            cache = self.root / "features" / split / f"{idx}.npy"
            if cache.exists():
                return np.load(cache)
        kind = "echo" if plan.kind == "echo" else "scene"
        values = extract_features(self.audio(plan), kind, self.bank.sample_rate).values
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            np.save(cache, values)
        return values


# ---------------------------------------------------------------- synthesis to disk


def _render_to_disk(args):
    manifest, root, clip_dict = args
    ds = Dataset(manifest, None)
    plan = ClipPlan.from_dict(clip_dict)
    clip, ref = render_clip(plan, ds.bank, ds.dry, ds.config.clip_length)
    wav, csv_path = _clip_paths(Path(root), plan.clip_id)
    write_wav(wav, clip.audio, ds.bank.sample_rate)
    files = {"audio": str(wav.relative_to(root)), "audio_sha256": sha256_file(wav)}
    if ref is not None:
        write_label_csv(csv_path, ref.to_rows())
        files.update(labels=str(csv_path.relative_to(root)), labels_sha256=sha256_file(csv_path))
    return plan.clip_id, files


def _write_irs(bank: EnvironmentBank, root: Path) -> Dict[str, str]:
    sums = {}
    done = set()
    for subset in ("Anechoic", "Reverb-S", "Test", "Echo", "Reverb-C"):
        for env_id, placement in bank.subset_irs(subset):
            if (env_id, placement) in done:
                continue
            done.add((env_id, placement))
            ir = bank.ir(env_id, placement)
            path = root / "irs" / env_id / f"{placement.tag()}.wav"
            write_wav(path, ir.samples, ir.sample_rate)
            sums[str(path.relative_to(root))] = sha256_file(path)
    bank._cache.clear()
    return sums


def verify_dataset(root) -> dict:
    """Recompute checksums of every file listed in the manifest."""
    root = Path(root)
    manifest = read_json(root / MANIFEST_NAME)
    bad, checked = [], 0
    listed = dict(manifest.get("ir_files", {}))
    for split in manifest["splits"].values():
        for clip in split:
            for key in ("audio", "labels"):
                if key in clip.get("files", {}):
                    listed[clip["files"][key]] = clip["files"][f"{key}_sha256"]
    for rel, digest in listed.items():
        checked += 1
        path = root / rel
        if not path.exists() or sha256_file(path) != digest:
            bad.append(rel)
    return {"checked": checked, "mismatched": bad, "ok": not bad, "plan_sha256": manifest["plan_sha256"]}


def synthesize_dataset(config: DatasetConfig, root, force: bool = False, workers: int = 1,
                       write_irs: bool = True) -> dict:
    """Plan, render and persist a dataset; returns a short report.

    Re-running with the same configuration on an existing root only verifies
    checksums unless ``force`` is set.
    """
    root = Path(root)
    bank = build_environment_bank(**config.bank_kwargs())
    manifest = build_splits(config, bank, DryBank(config.seed))
    existing = root / MANIFEST_NAME
    if existing.exists() and not force:
        old = read_json(existing)
        if old.get("plan_sha256") != manifest["plan_sha256"]:
            raise ConfigError(f"{root} holds a different dataset plan; pass --force to overwrite")
        report = verify_dataset(root)
        report["action"] = "verified"
        return report
    root.mkdir(parents=True, exist_ok=True)
    if write_irs:
        manifest["ir_files"] = _write_irs(bank, root)
    jobs = [(manifest, str(root), c) for split in manifest["splits"].values() for c in split]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = dict(pool.map(_render_to_disk, jobs, chunksize=4))
    else:
        results = dict(map(_render_to_disk, jobs))
    for split in manifest["splits"].values():
        for clip in split:
            clip["files"] = results[clip["clip_id"]]
    write_json(existing, manifest)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    log.info("wrote %s clips to %s", sum(counts.values()), root)
    return {"action": "written", "counts": counts, "plan_sha256": manifest["plan_sha256"], "ok": True}


# ---------------------------------------------------------------- training views


@dataclass
class ClipRecord:
    clip_id: str
    split: str
    env_id: str
    domain: int  # 0 anechoic, 1 reverberant
    snr_db: Optional[float]
    features: np.ndarray  # normalised (7, T, 64) float32
    reference: FrameEvents
    echo_id: Optional[str] = None


@dataclass
class FeatureNormalizer:
    scene: FeatureStats
    echo: Optional[FeatureStats] = None

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "echo": self.echo.to_dict() if self.echo else None}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        return cls(FeatureStats.from_dict(d["scene"]), FeatureStats.from_dict(d["echo"]) if d.get("echo") else None)


def fit_normalizer(dataset: Dataset, scene_splits, echo_splits=()) -> FeatureNormalizer:
    scene = compute_stats(dataset.features(p) for s in scene_splits for p in dataset.plans(s))
    echo = None
    if echo_splits:
        echo = compute_stats(dataset.features(p) for s in echo_splits for p in dataset.plans(s))
    return FeatureNormalizer(scene, echo)


def load_records(dataset: Dataset, split: str, normalizer: FeatureNormalizer) -> List[ClipRecord]:
    out = []
    for p in dataset.plans(split):
        env = dataset.bank.envs[p.env_id]
        feats = normalize(dataset.features(p), normalizer.scene)
        out.append(ClipRecord(p.clip_id, split, p.env_id, 0 if env.is_anechoic else 1, p.snr_db,
                              feats, dataset.reference(p), p.pair))
    return out


def load_echoes(dataset: Dataset, splits, normalizer: FeatureNormalizer, n_frames: int) -> Dict[str, np.ndarray]:
    if normalizer.echo is None:
        raise ConfigError("echo normalisation statistics missing")
    out = {}
    for split in splits:
        for p in dataset.plans(split):
            values = normalize(dataset.features(p), normalizer.echo)
            out[p.clip_id] = crop_echo_frames(values, n_frames).astype(np.float32)
    return out


def split_names() -> List[str]:
    return list(SPLIT_TABLE)
