"""Invariant and oracle checks run by ``earseld verify``.

Every check is independent of the code path it verifies: brute-force loops
for the metrics, explicit wall mirroring for the image sources, decimal
arithmetic for the GRL schedule and finite differences for the gradients.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from decimal import Decimal, getcontext
from typing import Callable, Dict, List

import numpy as np
import torch
from scipy.signal import fftconvolve

from .features import extract_features
from .labels import FrameEvents
from .metrics import SELDScores, doa_error, frame_recall, segment_f_er
from .model import EARNet, ModelConfig, grl
from .scenes import full_grid
from .spatial import (
    SAMPLE_RATE,
    EnvironmentSpec,
    SourcePlacement,
    image_sources,
    mirrored_positions,
    simulate_ir,
    source_position,
)
from .training import CONDITIONS, GrlSchedule, LossWeights, batch_loss, grl_lambda, total_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ---------------------------------------------------------------- GRL


def grl_max_deviation(n_cases: int = 100, seed: int = 0) -> tuple:
    """(max forward deviation, max backward deviation from -lambda * upstream)."""
    gen = torch.Generator().manual_seed(seed)
    fwd = bwd = 0.0
    for _ in range(n_cases):
        shape = tuple(int(s) for s in torch.randint(1, 6, (3,), generator=gen))
        lam = float(torch.rand((), generator=gen, dtype=torch.float64)) * 2.0
        x = torch.randn(shape, generator=gen, dtype=torch.float64, requires_grad=True)
        upstream = torch.randn(shape, generator=gen, dtype=torch.float64)
        y = grl(x, lam)
        y.backward(upstream)
        fwd = max(fwd, float((y - x).detach().abs().max()))
        bwd = max(bwd, float((x.grad + lam * upstream).abs().max()))
    return fwd, bwd


def check_grl() -> CheckResult:
    fwd, bwd = grl_max_deviation()
    return CheckResult("GRL identity / reversal", fwd == 0.0 and bwd <= 1e-12, f"fwd={fwd:.1e} bwd={bwd:.1e}")


def schedule_reference(p: float, gamma: float = 10.0, lam_max: float = 0.01) -> Decimal:
    getcontext().prec = 50
    p = Decimal(repr(p))
    return Decimal(repr(lam_max)) * (Decimal(2) / (1 + (-Decimal(repr(gamma)) * p).exp()) - 1)


def check_schedule() -> CheckResult:
    sched = GrlSchedule(0.01, 10.0, 100)
    worst = 0.0
    for p in (0.0, 0.25, 0.5, 0.75, 1.0):
        got = grl_lambda(p * sched.max_epoch, sched)
        worst = max(worst, abs(Decimal(repr(got)) - schedule_reference(p)))
    zero = grl_lambda(0, sched) == 0.0
    return CheckResult("GRL schedule", float(worst) <= 1e-9 and zero, f"max err={float(worst):.1e}, p=0 exact={zero}")


# ---------------------------------------------------------------- losses


def check_loss_weights() -> CheckResult:
    w = LossWeights()
    ones = {"seld": 1.0, "domain": 1.0, "echo": 1.0}
    value = total_loss(ones, w)
    presets = []
    for name, cond in CONDITIONS.items():
        comps = {"seld": 1.0}
        if cond.use_domain:
            comps["domain"] = 1.0
        if cond.use_echo:
            comps["echo"] = 1.0
        expected = 3.0 + (1.0 if cond.use_domain else 0.0) + (0.01 if cond.use_echo else 0.0)
        presets.append(total_loss(comps, w) == expected)
    ok = value == 4.01 and all(presets)
    return CheckResult("loss weighting", ok, f"total(1,1,1)={value!r}, presets ok={all(presets)}")


def miniature_batch(cfg: ModelConfig, batch: int = 4, n_frames: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    t_out = n_frames // cfg.time_reduction
    x = torch.as_tensor(rng.standard_normal((batch, cfg.in_channels, n_frames, cfg.n_mels)))
    echo = torch.as_tensor(rng.standard_normal((batch, cfg.in_channels, cfg.echo_frames, cfg.echo_mels)))
    sed = torch.as_tensor((rng.random((batch, t_out, cfg.n_classes)) < 0.5).astype(np.float64))
    doa = torch.as_tensor(rng.uniform(-1, 1, (batch, t_out, 3 * cfg.n_classes)))
    d = torch.as_tensor(np.arange(batch) % 2, dtype=torch.float64)
    return x, echo, sed, doa, d


def _loss_terms(model, x, echo, sed_t, doa_t, d, lam):
    """Per-element terms of the weighted objective, computed independently of the trainer.

    Returns a list of (elements, scale) with the objective equal to
    sum(scale * elements.sum()) for every entry.
    """
    w = LossWeights()
    out = model(x, echo, grl_lambda=lam, with_domain=True)
    p = out["sed"].clamp(1e-7, 1 - 1e-7)
    bce = -(sed_t * torch.log(p) + (1 - sed_t) * torch.log(1 - p))
    mask = sed_t.repeat_interleave(3, dim=-1)
    sq = mask * (out["doa"] - doa_t) ** 2
    q = out["domain"].clamp(1e-7, 1 - 1e-7)
    dom = -(d * torch.log(q) + (1 - d) * torch.log(1 - q))
    rec = (out["echo_recon"] - echo) ** 2
    return [
        (bce, w.seld / bce.numel()),
        (sq, w.seld * w.doa / float(mask.sum())),
        (dom, w.domain / dom.numel()),
        (rec, w.echo / rec.numel()),
    ]


FD_STEPS = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
FD_AGREE = 1e-5


def _stencil(model, p, idx, batch, lam, sign, eps) -> float:
    x, echo, sed, doa, d = batch
    terms = {}
    with torch.no_grad():
        orig = float(p[idx])
        for step in (-2, -1, 1, 2):
            p[idx] = orig + step * eps
            terms[step] = _loss_terms(model, x, echo, sed, doa, d, lam)
        p[idx] = orig
    numeric = 0.0
    for j in range(4):
        scale = terms[1][j][1] * (sign if j == 2 else 1.0)
        near = terms[1][j][0] - terms[-1][j][0]
        far = terms[2][j][0] - terms[-2][j][0]
        numeric += scale * float((8 * near - far).sum()) / (12 * eps)
    return numeric


def finite_difference(model, p, idx, batch, lam, sign, steps=FD_STEPS) -> float:
    """Five-point estimate from a sweep of step sizes.

    Steps that straddle a ReLU / max-pool kink are biased (and agree with
    each other, since the bias saturates), very small steps drown in
    round-off.  The smallest step that agrees with the next larger one to
    FD_AGREE is taken; failing that, the most stable adjacent pair.
    """
    est = [_stencil(model, p, idx, batch, lam, sign, e) for e in steps]
    gaps = [abs(a - b) / max(abs(a), abs(b), 1e-12) for a, b in zip(est, est[1:])]
    for i in range(len(gaps) - 1, -1, -1):
        if gaps[i] <= FD_AGREE:
            return est[i + 1]
    return est[int(np.argmin(gaps)) + 1]


def gradient_check(n_samples: int = 300, seed: int = 0, lam: float = 0.5) -> dict:
    """Analytic gradient of the full objective vs finite differences.

    With the GRL in place the backward pass does not differentiate a single
    scalar: upstream parameters see -lambda times the domain gradient.  The
    finite-difference oracle therefore perturbs the matching surrogate
    ``3 L_seld + 0.01 L_echo + s * L_domain`` with s = 1 for the domain
    classifier and s = -lambda everywhere else.

    Differences are taken element by element before summation (a five-point
    stencil per loss term), which keeps round-off from the O(100) loss total
    out of gradients as small as 1e-7.
    """
    torch.manual_seed(seed)
    cfg = ModelConfig.miniature()
    model = EARNet(cfg).double()
    model.train()
    x, echo, sed, doa, d = miniature_batch(cfg, seed=seed)

    model.zero_grad()
    total, _, _ = batch_loss(model, x, echo, sed, doa, d, LossWeights(), lam)
    total.backward()

    domain_params = {id(p) for p in model.H.parameters()}
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rel = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), tuple(p.shape))
        sign = 1.0 if id(p) in domain_params else -lam
        analytic = float(p.grad[idx])
        numeric = finite_difference(model, p, idx, (x, echo, sed, doa, d), lam, sign)
        rel.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    rel = np.array(rel)
    return {"fraction_ok": float(np.mean(rel < 1e-4)), "median_rel": float(np.median(rel)), "n": len(rel)}


def check_gradients() -> CheckResult:
    res = gradient_check()
    return CheckResult("full-loss gradient check", res["fraction_ok"] >= 0.99,
                       f"{100 * res['fraction_ok']:.1f}% of {res['n']} params rel err < 1e-4")


# ---------------------------------------------------------------- metrics


def random_events(rng, n_frames, n_classes, p=0.3, max_active=2) -> FrameEvents:
    ev = FrameEvents.empty(n_frames)
    for t in range(n_frames):
        classes = [c for c in range(n_classes) if rng.random() < p][:max_active]
        for c in classes:
            v = rng.standard_normal(3)
            ev.add(t, c, v / np.linalg.norm(v))
    return ev


def brute_force_f_er(pred: FrameEvents, ref: FrameEvents, n_classes: int, seg: int = 10):
    tp = fp = fn = s = dl = ins = n = 0
    for start in range(0, len(ref), seg):
        p_act = set()
        r_act = set()
        for t in range(start, min(start + seg, len(ref))):
            p_act |= {c for c, _ in pred.frames[t]}
            r_act |= {c for c, _ in ref.frames[t]}
        seg_tp = seg_fp = seg_fn = 0
        for c in range(n_classes):
            if c in p_act and c in r_act:
                seg_tp += 1
            elif c in p_act:
                seg_fp += 1
            elif c in r_act:
                seg_fn += 1
        tp, fp, fn = tp + seg_tp, fp + seg_fp, fn + seg_fn
        s += min(seg_fn, seg_fp)
        dl += max(0, seg_fn - seg_fp)
        ins += max(0, seg_fp - seg_fn)
        n += len(r_act)
    f = 100.0 if 2 * tp + fp + fn == 0 else 200.0 * tp / (2 * tp + fp + fn)
    return f, (s + dl + ins) / max(n, 1)


def brute_force_doa(pred: FrameEvents, ref: FrameEvents) -> float:
    """Best assignment by enumerating permutations, per frame."""
    total, pairs = 0.0, 0
    for pf, rf in zip(pred.frames, ref.frames):
        pv = [v for _, v in pf if v is not None]
        rv = [v for _, v in rf if v is not None]
        if not pv or not rv:
            continue
        small, large = (pv, rv) if len(pv) <= len(rv) else (rv, pv)
        best = math.inf
        for perm in itertools.permutations(range(len(large)), len(small)):
            cost = 0.0
            for i, j in zip(range(len(small)), perm):
                dot = sum(a * b for a, b in zip(small[i], large[j]))
                cost += math.degrees(math.acos(max(-1.0, min(1.0, dot))))
            best = min(best, cost)
        total += best
        pairs += len(small)
    return 180.0 if pairs == 0 else total / pairs


def check_metrics(n_cases: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    fer_ok = 0
    de_worst = 0.0
    for _ in range(n_cases):
        n_classes = int(rng.integers(1, 5))
        n_frames = int(rng.integers(1, 35))
        pred = random_events(rng, n_frames, n_classes)
        ref = random_events(rng, n_frames, n_classes)
        fer_ok += segment_f_er(pred, ref, n_classes) == brute_force_f_er(pred, ref, n_classes)
        de_worst = max(de_worst, abs(doa_error(pred, ref) - brute_force_doa(pred, ref)))
    # constructed frame-recall case: counts (1,2,0,1) vs (1,1,0,2) -> 2 of 4 match
    u = np.array([1.0, 0.0, 0.0])
    pred = FrameEvents([[(0, u)], [(0, u), (1, u)], [], [(2, u)]])
    ref = FrameEvents([[(1, u)], [(0, u)], [], [(0, u), (1, u)]])
    fr_ok = frame_recall(pred, ref) == 50.0 and SELDScores(3).update(pred, ref).frame_recall == 50.0
    ok = fer_ok == n_cases and de_worst <= 1e-9 and fr_ok
    return CheckResult("metric oracles", ok, f"F/ER exact {fer_ok}/{n_cases}, DE max dev {de_worst:.1e}, FR ok={fr_ok}")


# ---------------------------------------------------------------- spatial / features


def check_image_sources(max_order: int = 3) -> CheckResult:
    env = EnvironmentSpec("check", room_dims=(6.3, 5.1, 3.2), absorption=(0.3,) * 6, mic_position=(2.2, 2.9, 1.4), is_anechoic=False)
    placement = SourcePlacement(40.0, 20.0, 150)
    pos, _, _ = image_sources(env, placement, max_order)
    oracle = mirrored_positions(env.room_dims, source_position(env, placement), max_order)
    got = {tuple(np.round(p, 9)) for p in pos}
    return CheckResult("image-source lattice", got == oracle, f"{len(got)} images vs {len(oracle)} mirrored")


def doa_readback_errors(duration: float = 0.5, seed: int = 0) -> np.ndarray:
    """Intensity-vector direction error (degrees) for every anechoic grid point."""
    env = EnvironmentSpec("anechoic")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(int(duration * SAMPLE_RATE))
    errs = []
    for placement in full_grid():
        ir = simulate_ir(env, placement, max_order=0)
        audio = np.stack([fftconvolve(noise, h) for h in ir.samples])
        iv = extract_features(audio, "scene").values[4:7].astype(np.float64)
        v = iv.mean(axis=(1, 2))
        cos = v @ placement.unit_vector() / np.linalg.norm(v)
        errs.append(math.degrees(math.acos(max(-1.0, min(1.0, cos)))))
    return np.array(errs)


def check_doa_fidelity() -> CheckResult:
    errs = doa_readback_errors()
    frac = float(np.mean(errs < 5.0))
    return CheckResult("DOA feature fidelity", frac >= 0.95, f"{100 * frac:.1f}% of {len(errs)} points < 5 deg, "
                       f"max {errs.max():.2f} deg")


ALL_CHECKS: Dict[str, Callable[[], CheckResult]] = {
    "grl": check_grl,
    "schedule": check_schedule,
    "loss_weights": check_loss_weights,
    "gradients": check_gradients,
    "metrics": check_metrics,
    "image_sources": check_image_sources,
    "doa_fidelity": check_doa_fidelity,
}


def run_checks(names=None) -> List[CheckResult]:
    results = []
    for name in names or ALL_CHECKS:
        start = time.time()
        res = ALL_CHECKS[name]()
        res.seconds = time.time() - start
        results.append(res)
    return results
