"""Experiment orchestration: condition data views, evaluation, embedding export."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .dataset import (
    ClipRecord,
    Dataset,
    FeatureNormalizer,
    load_echoes,
    load_records,
)
from .errors import ConfigError
from .io import read_json, write_json
from .features import compute_stats
from .metrics import MetricReport, compute_metrics, format_table
from .model import EARNet, load_checkpoint
from .training import (
    CONDITIONS,
    TrainConfig,
    TrainingData,
    evaluate_records,
    get_condition,
    predict,
    train,
)

log = logging.getLogger(__name__)

# Narrower network for CPU-only desk-scale runs.
DESK_MODEL = {"cnn_filters": 32, "rnn_hidden": 128}


def carve_validation(plans, fraction: float, rng: np.random.Generator):
    """Split plans into (train, validation), environment-disjoint where possible."""
    if fraction <= 0 or len(plans) < 2:
        return list(plans), []
    target = max(1, int(round(fraction * len(plans))))
    envs = sorted({p.env_id for p in plans})
    if len(envs) >= 2:
        held = set()
        count = 0
        for e in rng.permutation(envs):
            if count >= target or len(held) == len(envs) - 1:
                break
            held.add(e)
            count += sum(1 for p in plans if p.env_id == e)
        return [p for p in plans if p.env_id not in held], [p for p in plans if p.env_id in held]
    idx = set(rng.choice(len(plans), size=target, replace=False).tolist())
    return [p for i, p in enumerate(plans) if i not in idx], [p for i, p in enumerate(plans) if i in idx]


def _records_from_plans(dataset: Dataset, plans, split, normalizer) -> List[ClipRecord]:
    keep = {p.clip_id for p in plans}
    return [r for r in load_records(dataset, split, normalizer) if r.clip_id in keep]


def prepare_training_data(dataset: Dataset, condition_name: str, val_fraction: float = 0.1, seed: int = 0,
                          echo_frames: int = 224) -> TrainingData:
    condition = get_condition(condition_name)
    dataset.require(*condition.required_splits)
    rng = np.random.default_rng([seed, 0x5A])
    train_plans, val_plans = {}, {}
    for split in condition.scene_splits:
        train_plans[split], val_plans[split] = carve_validation(dataset.plans(split), val_fraction, rng)
    normalizer = fit_normalizer_plans(dataset, train_plans, condition.echo_splits)
    records = {s: _records_from_plans(dataset, train_plans[s], s, normalizer) for s in condition.scene_splits}
    validation = [r for s in condition.scene_splits for r in _records_from_plans(dataset, val_plans[s], s, normalizer)]
    data = TrainingData(records, validation=validation, normalizer=normalizer)
    if condition.use_echo:
        data.echoes = load_echoes(dataset, condition.echo_splits, normalizer, echo_frames)
        for split in condition.echo_splits:
            for p in dataset.plans(split):
                data.echo_env[p.clip_id] = p.env_id
                data.echo_snr[p.clip_id] = p.snr_db
        data.anechoic_echo_id = dataset.plans("Train-echo-anec")[0].clip_id
    return data


def fit_normalizer_plans(dataset: Dataset, plans_by_split, echo_splits=()) -> FeatureNormalizer:
    scene = compute_stats(dataset.features(p) for plans in plans_by_split.values() for p in plans)
    echo = None
    if echo_splits:
        echo = compute_stats(dataset.features(p) for s in echo_splits for p in dataset.plans(s))
    return FeatureNormalizer(scene, echo)


def load_eval_data(dataset: Dataset, split: str, normalizer: FeatureNormalizer, model: EARNet):
    """Records of a split plus, for echo models, the paired echo features."""
    dataset.require(split)
    records = load_records(dataset, split, normalizer)
    echoes = {}
    if model.G is not None:
        echo_ids = {r.echo_id for r in records}
        if None in echo_ids:
            raise ConfigError(f"split {split} has clips without a paired echo clip")
        echo_splits = sorted({e.split("/")[0] for e in echo_ids})
        echoes = load_echoes(dataset, echo_splits, normalizer, model.cfg.echo_frames)
    return records, echoes


def evaluate_split(checkpoint, dataset: Dataset, split: str = "Test", threshold: float = 0.5) -> MetricReport:
    model, meta = load_checkpoint(checkpoint)
    normalizer = FeatureNormalizer.from_dict(meta["stats"])
    records, echoes = load_eval_data(dataset, split, normalizer, model)
    return evaluate_records(model, records, echoes, threshold=threshold)


def oracle_report(dataset: Dataset, split: str, n_classes: int = 12) -> MetricReport:
    """Reference-as-prediction surrogate: must score DE 0, FR 100, F 100, ER 0."""
    dataset.require(split)
    refs = (dataset.reference(p) for p in dataset.plans(split))
    return compute_metrics(((ref, ref) for ref in refs), n_classes)


EMBED_COLUMNS = ("clip_id", "env_id", "domain", "stage")


def export_embeddings(checkpoint, dataset: Dataset, splits, out_csv) -> int:
    """Time-pooled f and f' per clip; one row per (clip, stage)."""
    model, meta = load_checkpoint(checkpoint)
    normalizer = FeatureNormalizer.from_dict(meta["stats"])
    width = max(model.cfg.feature_dim, model.cfg.refined_dim)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(EMBED_COLUMNS) + [f"v{i}" for i in range(width)])
        for split in splits:
            records, echoes = load_eval_data(dataset, split, normalizer, model)
            for rec, out in zip(records, predict(model, records, echoes, with_features=True)):
                domain = "anechoic" if rec.domain == 0 else "reverberant"
                for stage, key in (("f", "f"), ("f_refined", "f_refined")):
                    vec = out[key].mean(axis=0)
                    w.writerow([rec.clip_id, rec.env_id, domain, stage]
                               + [f"{v:.6g}" for v in vec] + [""] * (width - len(vec)))
                    n_rows += 1
    return n_rows


# ---------------------------------------------------------------- desk-scale trend


@dataclass
class TrendConfig:
    conditions: tuple = ("B", "D", "F")
    seeds: tuple = (0, 1, 2)
    epochs: int = 25
    batch_size: int = 64
    lr: float = 0.01
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    val_fraction: float = 0.0


def run_trend(dataset: Dataset, cfg: TrendConfig, out_dir=None) -> dict:
    """Train every (condition, seed) pair and evaluate on the Test split.

    With an output directory each finished run leaves ``result.json`` in its
    run directory; a re-run with the same settings and dataset reuses it.
    """
    results: Dict[str, List[dict]] = {c: [] for c in cfg.conditions}
    out_dir = Path(out_dir) if out_dir is not None else None
    for cond in cfg.conditions:
        for seed in cfg.seeds:
            run_dir = out_dir / f"{cond}_seed{seed}" if out_dir is not None else None
            key = {"trend": asdict(cfg), "plan_sha256": dataset.manifest["plan_sha256"]}
            cached = run_dir / "result.json" if run_dir is not None else None
            if cached is not None and cached.exists():
                prev = read_json(cached)
                if prev.get("key") == json.loads(json.dumps(key)):
                    results[cond].append(prev["report"])
                    continue
            data = prepare_training_data(dataset, cond, cfg.val_fraction, seed, echo_frames=224)
            tc = TrainConfig(condition=cond, batch_size=cfg.batch_size, lr=cfg.lr, epochs=cfg.epochs, seed=seed,
                             model=dict(cfg.model), validate=bool(data.validation))
            result = train(tc, data, run_dir)
            records, echoes = load_eval_data(dataset, "Test", data.normalizer, result.model)
            report = {"seed": seed, **evaluate_records(result.model, records, echoes).to_dict()}
            log.info("condition %s seed %d: %s", cond, seed, report)
            results[cond].append(report)
            if cached is not None:
                write_json(cached, {"key": key, "report": report})
    summary = {
        c: {m: statistics.median(r[m] for r in runs) for m in ("DE", "FR", "F", "ER")}
        for c, runs in results.items()
    }
    out = {"config": asdict(cfg), "runs": results, "median": summary}
    if out_dir is not None:
        write_json(out_dir / "trend.json", out)
    return out


def trend_table(summary: dict) -> str:
    rows = [(f"({c}) {CONDITIONS[c].label}", MetricReport(**m)) for c, m in summary.items()]
    return format_table(rows)
