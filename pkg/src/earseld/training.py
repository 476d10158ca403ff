"""Losses, GRL schedule, batch composition and the optimisation loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ClipRecord
from .errors import ConfigError, DivergenceError, ShapeError
from .labels import FrameEvents
from .metrics import MetricReport, SELDScores, binarize
from .model import EARNet, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    doa: float = 100.0
    seld: float = 3.0
    domain: float = 1.0
    echo: float = 0.01

    def __post_init__(self):
        if min(self.doa, self.seld, self.domain, self.echo) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class GrlSchedule:
    lambda_max: float = 0.01
    gamma: float = 10.0
    max_epoch: int = 100


def grl_lambda(epoch: float, schedule: GrlSchedule) -> float:
    """lambda_max * (2 / (1 + exp(-gamma * p)) - 1) with p = epoch / max_epoch."""
    p = epoch / schedule.max_epoch
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0)


# ---------------------------------------------------------------- losses


def seld_loss(sed, doa, sed_target, doa_target, lambda_doa: float = 100.0):
    """BCE over all SED entries + lambda_doa * MSE over DOA entries of active classes.

    Returns ``(total, bce, masked_mse)``.
    """
    if sed.shape != sed_target.shape or doa.shape != doa_target.shape:
        raise ShapeError(f"prediction {tuple(sed.shape)}/{tuple(doa.shape)} vs target "
                         f"{tuple(sed_target.shape)}/{tuple(doa_target.shape)}")
    if doa.shape[-1] != 3 * sed.shape[-1]:
        raise ShapeError("DOA output must hold 3 values per class")
    bce = F.binary_cross_entropy(sed.clamp(PROB_EPS, 1 - PROB_EPS), sed_target)
    mask = sed_target.repeat_interleave(3, dim=-1)
    n_active = mask.sum()
    if n_active > 0:
        mse = (((doa - doa_target) ** 2) * mask).sum() / n_active
    else:
        mse = doa.sum() * 0.0
    return bce + lambda_doa * mse, bce, mse


def domain_loss(d_hat, d):
    return F.binary_cross_entropy(d_hat.clamp(PROB_EPS, 1 - PROB_EPS), d.to(d_hat.dtype))


def echo_loss(z_in, z_recon):
    return F.mse_loss(z_recon, z_in)


def total_loss(components: Dict[str, object], weights: LossWeights):
    """lambda_seld * L_seld + lambda_domain * L_domain + lambda_echo * L_echo.

    Missing components contribute nothing.
    """
    total = 0.0
    for name, w in (("seld", weights.seld), ("domain", weights.domain), ("echo", weights.echo)):
        value = components.get(name)
        if value is not None:
            total = total + w * value
    return total


# ---------------------------------------------------------------- conditions


@dataclass(frozen=True)
class Condition:
    name: str
    label: str
    scene_splits: tuple
    two_domain: bool = False
    use_domain: bool = False
    use_echo: bool = False

    @property
    def echo_splits(self) -> tuple:
        return ("Train-echo-rev", "Train-echo-anec") if self.use_echo else ()

    @property
    def required_splits(self) -> tuple:
        return self.scene_splits + self.echo_splits


CONDITIONS = {
    "A": Condition("A", "Target (Oracle)", ("Train-target",)),
    "B": Condition("B", "Source", ("Train-anec",)),
    "C": Condition("C", "Baseline", ("Train-base", "Train-anec")),
    "D": Condition("D", "NoAdap", ("Train-rev", "Train-anec"), two_domain=True),
    "E": Condition("E", "DAT", ("Train-rev", "Train-anec"), two_domain=True, use_domain=True),
    "F": Condition("F", "Proposed", ("Train-rev", "Train-anec"), two_domain=True, use_domain=True, use_echo=True),
}


def get_condition(name: str) -> Condition:
    try:
        return CONDITIONS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown condition {name!r}; choose from {', '.join(CONDITIONS)}") from None


def model_config_for(condition: Condition, **overrides) -> ModelConfig:
    """Preset switching the echo autoencoder and domain classifier on or off."""
    return ModelConfig(**{**overrides, "use_echo": condition.use_echo, "use_domain": condition.use_domain})


# ---------------------------------------------------------------- batches


class CyclicPool:
    """Endless shuffled iteration over a list; reshuffles at every wrap."""

    def __init__(self, items, rng: np.random.Generator):
        if not items:
            raise ConfigError("cannot draw batches from an empty pool")
        self.items = list(items)
        self.rng = rng
        self._order = []
        self.reshuffles = 0

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.items)))
                self.reshuffles += 1
            out.append(self.items[self._order.pop()])
        return out


@dataclass
class BatchItem:
    record: ClipRecord
    domain: int
    echo_id: Optional[str] = None


class BatchComposer:
    """Half anechoic / half reverberant batches for two-domain conditions.

    Single-pool conditions draw the whole batch from the union of their
    splits.  Under echo conditions every reverberant clip carries its paired
    echo clip and anechoic clips carry the single anechoic echo clip.
    """

    def __init__(self, condition: Condition, records: Dict[str, List[ClipRecord]], batch_size: int,
                 rng: np.random.Generator, anechoic_echo_id: Optional[str] = None):
        self.condition = condition
        self.batch_size = batch_size
        self.anechoic_echo_id = anechoic_echo_id
        if condition.two_domain:
            if batch_size % 2:
                raise ConfigError("two-domain batches need an even batch size")
            self.pools = {
                "anec": CyclicPool(records["Train-anec"], rng),
                "rev": CyclicPool(records["Train-rev"], rng),
            }
            largest = max(len(records["Train-anec"]), len(records["Train-rev"]))
            self.steps_per_epoch = max(1, math.ceil(largest / (batch_size // 2)))
        else:
            union = [r for s in condition.scene_splits for r in records[s]]
            self.pools = {"all": CyclicPool(union, rng)}
            self.steps_per_epoch = max(1, math.ceil(len(union) / batch_size))
        if condition.use_echo and anechoic_echo_id is None:
            raise ConfigError("condition F needs the Train-echo-anec clip")

    def _item(self, rec: ClipRecord) -> BatchItem:
        echo = None
        if self.condition.use_echo:
            echo = self.anechoic_echo_id if rec.domain == 0 else rec.echo_id
            if echo is None:
                raise ConfigError(f"{rec.clip_id} has no paired echo clip")
        return BatchItem(rec, rec.domain, echo)

    def next_batch(self) -> List[BatchItem]:
        if self.condition.two_domain:
            half = self.batch_size // 2
            recs = self.pools["anec"].take(half) + self.pools["rev"].take(half)
        else:
            recs = self.pools["all"].take(self.batch_size)
        return [self._item(r) for r in recs]


def compose_batch(condition: Condition, records, rng, batch_size: int = 64, anechoic_echo_id=None):
    return BatchComposer(condition, records, batch_size, rng, anechoic_echo_id).next_batch()


def audit_batch(items: List[BatchItem], echo_env: Dict[str, str], echo_snr: Dict[str, Optional[float]],
                anechoic_echo_id: Optional[str]) -> dict:
    """Composition summary written to the training log for every batch."""
    n_anec = sum(1 for it in items if it.domain == 0)
    ok = True
    for it in items:
        if it.echo_id is None:
            continue
        if it.domain == 0:
            ok &= it.echo_id == anechoic_echo_id
        else:
            ok &= echo_env.get(it.echo_id) == it.record.env_id and echo_snr.get(it.echo_id) == it.record.snr_db
    return {
        "n_anechoic": n_anec,
        "n_reverberant": len(items) - n_anec,
        "domain_sum": int(sum(it.domain for it in items)),
        "echo_pairing_ok": bool(ok),
        "pairs": [[it.record.clip_id, it.echo_id] for it in items],
    }


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    condition: str = "F"
    batch_size: int = 64
    lr: float = 0.01
    epochs: int = 100
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    grl_max: float = 0.01
    grl_gamma: float = 10.0
    model: dict = field(default_factory=dict)
    dtype: str = "float32"
    reference_mode: bool = True
    validate: bool = True
    max_steps: Optional[int] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @property
    def schedule(self) -> GrlSchedule:
        return GrlSchedule(self.grl_max, self.grl_gamma, self.epochs)


@dataclass
class TrainingData:
    records: Dict[str, List[ClipRecord]]
    echoes: Dict[str, np.ndarray] = field(default_factory=dict)
    echo_env: Dict[str, str] = field(default_factory=dict)
    echo_snr: Dict[str, Optional[float]] = field(default_factory=dict)
    anechoic_echo_id: Optional[str] = None
    validation: List[ClipRecord] = field(default_factory=list)
    normalizer: object = None


@dataclass
class TrainResult:
    model: EARNet
    history: list
    best_epoch: Optional[int] = None
    best_de: Optional[float] = None
    checkpoints: dict = field(default_factory=dict)


def _targets(records, n_frames, n_classes, dtype):
    sed, doa = zip(*(r.reference.to_targets(n_classes, n_frames) for r in records))
    return torch.as_tensor(np.stack(sed), dtype=dtype), torch.as_tensor(np.stack(doa), dtype=dtype)


def batch_loss(model: EARNet, x, echo, sed_t, doa_t, d, weights: LossWeights, lam: float):
    """Forward pass plus weighted objective on ready-made tensors.

    Returns ``(total, component dict, model outputs)``.
    """
    out = model(x, echo, grl_lambda=lam, with_domain=True)
    bad = [k for k, v in out.items() if not bool(torch.isfinite(v).all())]
    if bad:
        raise DivergenceError(f"non-finite network output in {', '.join(bad)}")
    l_seld, bce, mse = seld_loss(out["sed"], out["doa"], sed_t, doa_t, weights.doa)
    comps = {"seld": l_seld}
    if "domain" in out:
        comps["domain"] = domain_loss(out["domain"], d)
    if echo is not None:
        comps["echo"] = echo_loss(echo, out["echo_recon"])
    total = total_loss(comps, weights)
    parts = {k: float(v.detach()) for k, v in comps.items()}
    parts.update(sed_bce=float(bce.detach()), doa_mse=float(mse.detach()))
    return total, parts, out


def forward_batch(model: EARNet, items: List[BatchItem], data: TrainingData, weights: LossWeights,
                  lam: float, dtype=torch.float32):
    """One forward pass over a composed batch; see :func:`batch_loss`."""
    x = torch.as_tensor(np.stack([it.record.features for it in items]), dtype=dtype)
    echo = None
    if model.G is not None:
        echo = torch.as_tensor(np.stack([data.echoes[it.echo_id] for it in items]), dtype=dtype)
    n_frames = x.shape[2] // model.cfg.time_reduction
    sed_t, doa_t = _targets([it.record for it in items], n_frames, model.cfg.n_classes, dtype)
    d = torch.as_tensor([it.domain for it in items], dtype=dtype)
    return batch_loss(model, x, echo, sed_t, doa_t, d, weights, lam)


@torch.no_grad()
def predict(model: EARNet, records: List[ClipRecord], echoes: Optional[Dict[str, np.ndarray]] = None,
            anechoic_echo_id: Optional[str] = None, batch_size: int = 8, with_features: bool = False):
    """Inference in eval mode; returns per-clip dicts of numpy arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    results = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        x = torch.as_tensor(np.stack([r.features for r in chunk]), dtype=dtype)
        echo = None
        if model.G is not None:
            ids = [anechoic_echo_id if r.domain == 0 and r.echo_id is None else r.echo_id for r in chunk]
            echo = torch.as_tensor(np.stack([echoes[e] for e in ids]), dtype=dtype)
        out = model(x, echo, with_domain=False)
        for j in range(len(chunk)):
            item = {"sed": out["sed"][j].numpy(), "doa": out["doa"][j].numpy()}
            if with_features:
                item["f"] = out["f"][j].numpy()
                item["f_refined"] = out["f_refined"][j].numpy()
            results.append(item)
    return results


def evaluate_records(model: EARNet, records: List[ClipRecord], echoes=None, anechoic_echo_id=None,
                     threshold: float = 0.5) -> MetricReport:
    scores = SELDScores(model.cfg.n_classes)
    for rec, out in zip(records, predict(model, records, echoes, anechoic_echo_id)):
        pred = binarize(out["sed"], out["doa"], threshold)
        scores.update(pred, rec.reference.truncate(len(pred)))
    return scores.report()


def set_reference_mode():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train(config: TrainConfig, data: TrainingData, out_dir=None) -> TrainResult:
    """Run the optimisation loop for one condition.

    Writes ``train_log.jsonl`` (one record per batch and per epoch) and
    ``final.npz`` / ``best.npz`` checkpoints when ``out_dir`` is given.
    """
    condition = get_condition(config.condition)
    missing = [s for s in condition.scene_splits if not data.records.get(s)]
    if missing:
        raise ConfigError(f"condition {condition.name} needs split(s) {', '.join(missing)}")
    if config.reference_mode:
        set_reference_mode()
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 0x7A])
    model = EARNet(model_config_for(condition, **config.model)).to(dtype)
    optimiser = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, eps=config.adam_eps)
    composer = BatchComposer(condition, data.records, config.batch_size, rng, data.anechoic_echo_id)
    schedule = config.schedule

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
    history = []
    best_de, best_epoch = None, None
    seeds = {"train": config.seed}
    stats = data.normalizer.to_dict() if data.normalizer is not None else None
    extra = {"condition": condition.name, "train_config": config.to_dict(),
             "anechoic_echo_id": data.anechoic_echo_id}
    start = time.time()
    step = 0

    def emit(rec):
        history.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    try:
        for epoch in range(config.epochs):
            lam = grl_lambda(epoch, schedule) if condition.use_domain else 0.0
            model.train()
            sums: Dict[str, float] = {}
            n_batches = 0
            for _ in range(composer.steps_per_epoch):
                items = composer.next_batch()
                optimiser.zero_grad()
                try:
                    loss, parts, _ = forward_batch(model, items, data, config.weights, lam, dtype)
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} at epoch {epoch}, step {step}") from None
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}: {parts}")
                loss.backward()
                optimiser.step()
                rec = {"type": "batch", "epoch": epoch, "step": step, "loss": value, **parts,
                       "grl_lambda": lam, "lr": config.lr, "wall_time": time.time() - start}
                rec.update(audit_batch(items, data.echo_env, data.echo_snr, data.anechoic_echo_id))
                emit(rec)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                sums["loss"] = sums.get("loss", 0.0) + value
                n_batches += 1
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    break
            epoch_rec = {"type": "epoch", "epoch": epoch, "grl_lambda": lam, "lr": config.lr,
                         "wall_time": time.time() - start, **{k: v / n_batches for k, v in sums.items()}}
            if config.validate and data.validation:
                report = evaluate_records(model, data.validation, data.echoes, data.anechoic_echo_id)
                epoch_rec["val"] = report.to_dict()
                if best_de is None or report.DE < best_de:
                    best_de, best_epoch = report.DE, epoch
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.npz", model, stats, seeds, {**extra, "epoch": epoch})
            emit(epoch_rec)
            log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in epoch_rec.items() if isinstance(v, float)})
            if config.max_steps is not None and step >= config.max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    checkpoints = {}
    if out_dir is not None:
        save_checkpoint(out_dir / "final.npz", model, stats, seeds, {**extra, "epoch": config.epochs - 1})
        checkpoints["final"] = str(out_dir / "final.npz")
        if best_epoch is not None:
            checkpoints["best"] = str(out_dir / "best.npz")
    model.eval()
    return TrainResult(model, history, best_epoch, best_de, checkpoints)


def references_as_predictions(records: List[ClipRecord], n_frames: Optional[int] = None):
    """Oracle surrogate: each reference reused as its own prediction."""
    for r in records:
        ref = r.reference if n_frames is None else r.reference.truncate(n_frames)
        yield FrameEvents([list(f) for f in ref.frames], ref.hop), ref
