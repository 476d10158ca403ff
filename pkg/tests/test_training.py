import json
import math

import mpmath
import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from earseld.dataset import ClipRecord
from earseld.errors import ConfigError, DivergenceError, ShapeError
from earseld.labels import FrameEvents
from earseld.model import EARNet, ModelConfig
from earseld.training import (
    CONDITIONS,
    BatchComposer,
    CyclicPool,
    GrlSchedule,
    LossWeights,
    TrainConfig,
    TrainingData,
    audit_batch,
    batch_loss,
    compose_batch,
    domain_loss,
    echo_loss,
    get_condition,
    grl_lambda,
    model_config_for,
    seld_loss,
    total_loss,
    train,
)

D64 = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=D64)


# --------------------------------------------------------------- losses


def test_bce_at_half_is_ln2():
    sed = torch.full((2, 3, 4), 0.5, dtype=D64)
    target = torch.randint(0, 2, (2, 3, 4)).to(D64)
    total, bce, mse = seld_loss(sed, torch.zeros(2, 3, 12, dtype=D64), target, torch.zeros(2, 3, 12, dtype=D64))
    assert math.isclose(float(bce), math.log(2), rel_tol=1e-12)


def test_perfect_prediction_has_zero_doa_term():
    target = t([[[1, 0], [0, 1]]])
    doa_t = t([[[0.6, 0.8, 0, 0, 0, 0], [0, 0, 0, 0, 0, 1]]])
    _, bce, mse = seld_loss(target.clamp(1e-7, 1 - 1e-7), doa_t, target, doa_t)
    assert float(mse) == 0.0
    assert float(bce) < 1e-6


def test_single_active_frame_doa_example():
    sed_t = t([[[1.0]]])
    doa_t = t([[[0.0, 1.0, 0.0]]])
    total, bce, mse = seld_loss(torch.full_like(sed_t, 0.5), t([[[1.0, 0.0, 0.0]]]), sed_t, doa_t)
    assert math.isclose(float(mse), 2 / 3, rel_tol=1e-15)
    assert math.isclose(float(total), math.log(2) + 100 * 2 / 3, rel_tol=1e-12)


def test_empty_mask_gives_zero_mse():
    _, _, mse = seld_loss(torch.full((1, 2, 1), 0.3, dtype=D64), torch.ones(1, 2, 3, dtype=D64),
                          torch.zeros(1, 2, 1, dtype=D64), torch.zeros(1, 2, 3, dtype=D64))
    assert float(mse) == 0.0


def test_seld_loss_shape_errors():
    with pytest.raises(ShapeError):
        seld_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 9), torch.zeros(1, 2, 4), torch.zeros(1, 2, 9))
    with pytest.raises(ShapeError):
        seld_loss(torch.zeros(1, 2, 3), torch.zeros(1, 2, 8), torch.zeros(1, 2, 3), torch.zeros(1, 2, 8))


def test_domain_loss_examples():
    assert math.isclose(float(domain_loss(t([0.5]), t([1]))), math.log(2), rel_tol=1e-12)
    assert float(domain_loss(t([1.0, 0.0]), t([1, 0]))) < 1e-6
    a = float(domain_loss(t([0.2]), t([1])))
    b = float(domain_loss(t([0.9]), t([0])))
    assert math.isclose(float(domain_loss(t([0.2, 0.9]), t([1, 0]))), (a + b) / 2, rel_tol=1e-12)
    assert math.isclose(a, -math.log(0.2), rel_tol=1e-12)


def test_echo_loss_examples():
    z = torch.randn(2, 7, 8, 4, dtype=D64)
    assert float(echo_loss(z, z)) == 0.0
    assert math.isclose(float(echo_loss(z, z + 1)), 1.0, rel_tol=1e-12)
    off = z.clone()
    off.view(-1)[::2] += 2.0
    assert math.isclose(float(echo_loss(z, off)), 2.0, rel_tol=1e-12)


def test_total_loss_weights():
    w = LossWeights()
    assert (w.doa, w.seld, w.domain, w.echo) == (100.0, 3.0, 1.0, 0.01)
    assert total_loss({"seld": 1.0, "domain": 1.0, "echo": 1.0}, w) == 4.01
    assert total_loss({"seld": 0.7}, w) == 3 * 0.7
    assert total_loss({"seld": 0.0, "domain": 0.0, "echo": 0.0}, w) == 0.0
    with pytest.raises(ConfigError):
        LossWeights(echo=-1)


def test_condition_presets_select_terms():
    for name, (echo, dom) in {"A": (False, False), "B": (False, False), "C": (False, False),
                              "D": (False, False), "E": (False, True), "F": (True, True)}.items():
        cfg = model_config_for(get_condition(name), **ModelConfig.miniature().to_dict())
        assert (cfg.use_echo, cfg.use_domain) == (echo, dom)
    assert get_condition("b").scene_splits == ("Train-anec",)
    assert set(get_condition("C").scene_splits) == {"Train-base", "Train-anec"}
    assert get_condition("A").scene_splits == ("Train-target",)
    with pytest.raises(ConfigError):
        get_condition("G")


def _mini_batch(cfg, batch=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, 7, 20, cfg.n_mels, generator=g, dtype=D64)
    echo = torch.randn(batch, 7, cfg.echo_frames, cfg.echo_mels, generator=g, dtype=D64)
    sed_t = (torch.rand(batch, 4, cfg.n_classes, generator=g) > 0.5).to(D64)
    doa_t = torch.randn(batch, 4, cfg.n_classes, 3, generator=g, dtype=D64)
    doa_t = (doa_t / doa_t.norm(dim=-1, keepdim=True)).reshape(batch, 4, -1) * sed_t.repeat_interleave(3, -1)
    d = torch.tensor([0, 1] * (batch // 2), dtype=D64)
    return x, echo, sed_t, doa_t, d


@pytest.mark.parametrize("condition", ["D", "E", "F"])
def test_loss_decomposition_double(condition):
    cfg = model_config_for(get_condition(condition), **ModelConfig.miniature().to_dict())
    model = EARNet(cfg).double().train()
    x, echo, sed_t, doa_t, d = _mini_batch(cfg)
    total, parts, out = batch_loss(model, x, echo if cfg.use_echo else None, sed_t, doa_t, d, LossWeights(), 0.3)
    # independent recomputation in numpy
    sed, doa = out["sed"].detach().numpy(), out["doa"].detach().numpy()
    st_, dt_ = sed_t.numpy(), doa_t.numpy()
    p = np.clip(sed, 1e-7, 1 - 1e-7)
    bce = -np.mean(st_ * np.log(p) + (1 - st_) * np.log(1 - p))
    mask = np.repeat(st_, 3, axis=-1)
    mse = np.sum((doa - dt_) ** 2 * mask) / mask.sum()
    expected = 3.0 * (bce + 100.0 * mse)
    if cfg.use_domain:
        q = np.clip(out["domain"].detach().numpy(), 1e-7, 1 - 1e-7)
        dn = d.numpy()
        expected += -np.mean(dn * np.log(q) + (1 - dn) * np.log(1 - q))
    if cfg.use_echo:
        expected += 0.01 * np.mean((out["echo_recon"].detach().numpy() - echo.numpy()) ** 2)
    assert abs(float(total.detach()) - expected) <= 1e-12 * max(1.0, abs(expected))
    assert set(parts) >= ({"seld"} | ({"domain"} if cfg.use_domain else set()) | ({"echo"} if cfg.use_echo else set()))


def test_condition_d_total_is_three_seld():
    cfg = model_config_for(get_condition("D"), **ModelConfig.miniature().to_dict())
    model = EARNet(cfg).double().train()
    x, _, sed_t, doa_t, d = _mini_batch(cfg)
    total, parts, _ = batch_loss(model, x, None, sed_t, doa_t, d, LossWeights(), 0.5)
    assert set(parts) == {"seld", "sed_bce", "doa_mse"}
    assert float(total.detach()) == 3.0 * parts["seld"]


# --------------------------------------------------------------- GRL schedule


def _schedule_mp(p, gamma=10, lam=0.01):
    with mpmath.workdps(50):
        return lam * (2 / (1 + mpmath.exp(-gamma * mpmath.mpf(p))) - 1)


@pytest.mark.parametrize("p", [0, 0.25, 0.5, 0.75, 1.0])
def test_schedule_matches_high_precision(p):
    sched = GrlSchedule(0.01, 10.0, 100)
    assert abs(grl_lambda(p * 100, sched) - float(_schedule_mp(p))) <= 1e-9
    if p == 0:
        assert grl_lambda(0, sched) == 0.0


def test_schedule_example_values():
    sched = GrlSchedule(0.01, 10.0, 1)
    assert f"{grl_lambda(1, sched):.8f}".startswith("0.00999909")
    assert f"{grl_lambda(0.5, sched):.8f}".startswith("0.00986614")


@given(st.floats(0, 1), st.floats(0, 1))
def test_schedule_non_decreasing(a, b):
    sched = GrlSchedule(0.01, 10.0, 1)
    lo, hi = sorted((a, b))
    assert grl_lambda(lo, sched) <= grl_lambda(hi, sched)


def test_gradient_reversal_scales_linearly_with_lambda():
    cfg = ModelConfig.miniature()
    torch.manual_seed(1)
    model = EARNet(cfg).double().train()
    x, echo, *_ , d = _mini_batch(cfg)

    def feature_grad(lam):
        model.zero_grad()
        out = model(x, echo, grl_lambda=lam)
        domain_loss(out["domain"], d).backward()
        return torch.cat([p.grad.flatten() for p in model.R.parameters()])

    # frozen forward state: dropout is 0 and BN statistics come from the same batch
    g1, g2 = feature_grad(0.01), feature_grad(0.03)
    torch.testing.assert_close(g2, 3 * g1, rtol=1e-9, atol=1e-15)
    # unreversed gradient through the same classifier, computed by hand
    model.zero_grad()
    out = model(x, echo, grl_lambda=0.0)
    h = out["f_refined"].mean(dim=1)
    for i, layer in enumerate(model.H.layers):
        h = layer(h)
        if i < len(model.H.layers) - 1:
            h = F.relu(h)
    domain_loss(torch.sigmoid(h.squeeze(-1)), d).backward()
    plain = torch.cat([p.grad.flatten() for p in model.R.parameters()])
    torch.testing.assert_close(g1, -0.01 * plain, rtol=1e-9, atol=1e-15)


# --------------------------------------------------------------- batches


def fake_records(split, n, domain, prefix=None, n_mels=16, frames=20):
    rng = np.random.default_rng(abs(hash(split)) % 2**32)
    recs = []
    for i in range(n):
        env = "anechoic" if domain == 0 else f"revS-{i % 3:03d}"
        echo = None if domain == 0 else f"Train-echo-rev/{i:05d}"
        ref = FrameEvents.empty(frames // 5)
        ref.add(0, i % 2, (1.0, 0.0, 0.0))
        recs.append(ClipRecord(f"{prefix or split}/{i:05d}", split, env, domain, None if domain == 0 else 10.0 + i,
                               rng.standard_normal((7, frames, n_mels)).astype(np.float32), ref, echo))
    return recs


def fake_data(n_anec=40, n_rev=40, **kw):
    records = {"Train-anec": fake_records("Train-anec", n_anec, 0, **kw),
               "Train-rev": fake_records("Train-rev", n_rev, 1, **kw),
               "Train-base": fake_records("Train-base", 6, 1, **kw),
               "Train-target": fake_records("Train-target", 6, 1, **kw)}
    rng = np.random.default_rng(0)
    echoes = {"Train-echo-anec/00000": rng.standard_normal((7, 32, 16)).astype(np.float32)}
    env, snr = {}, {}
    for r in records["Train-rev"]:
        echoes[r.echo_id] = rng.standard_normal((7, 32, 16)).astype(np.float32)
        env[r.echo_id], snr[r.echo_id] = r.env_id, r.snr_db
    return TrainingData(records, echoes, env, snr, "Train-echo-anec/00000")


def test_condition_f_batch_is_half_and_half_with_pairing():
    data = fake_data()
    composer = BatchComposer(CONDITIONS["F"], data.records, 64, np.random.default_rng(0), data.anechoic_echo_id)
    for _ in range(5):
        items = composer.next_batch()
        audit = audit_batch(items, data.echo_env, data.echo_snr, data.anechoic_echo_id)
        assert (audit["n_anechoic"], audit["n_reverberant"], audit["domain_sum"]) == (32, 32, 32)
        assert audit["echo_pairing_ok"]
        assert all(it.echo_id == data.anechoic_echo_id for it in items if it.domain == 0)


def test_audit_detects_wrong_pairing():
    data = fake_data()
    items = compose_batch(CONDITIONS["F"], data.records, np.random.default_rng(0), 8, data.anechoic_echo_id)
    rev = next(it for it in items if it.domain == 1)
    rev.echo_id = next(e for e in data.echo_env if data.echo_env[e] != rev.record.env_id)
    assert not audit_batch(items, data.echo_env, data.echo_snr, data.anechoic_echo_id)["echo_pairing_ok"]


def test_single_pool_conditions_draw_from_their_splits():
    data = fake_data()
    b = compose_batch(CONDITIONS["B"], data.records, np.random.default_rng(0), 16)
    assert {it.record.split for it in b} == {"Train-anec"}
    c = BatchComposer(CONDITIONS["C"], data.records, 16, np.random.default_rng(0))
    seen = {it.record.split for _ in range(10) for it in c.next_batch()}
    assert seen == {"Train-base", "Train-anec"}
    a = compose_batch(CONDITIONS["A"], data.records, np.random.default_rng(0), 4)
    assert {it.record.split for it in a} == {"Train-target"}


def test_cyclic_pool_reshuffles_at_wrap():
    pool = CyclicPool(list(range(5)), np.random.default_rng(0))
    first = pool.take(5)
    assert sorted(first) == list(range(5)) and pool.reshuffles == 1
    pool.take(1)
    assert pool.reshuffles == 2
    with pytest.raises(ConfigError):
        CyclicPool([], np.random.default_rng(0))


def test_composer_validation():
    data = fake_data()
    with pytest.raises(ConfigError):
        BatchComposer(CONDITIONS["F"], data.records, 63, np.random.default_rng(0), data.anechoic_echo_id)
    with pytest.raises(ConfigError):
        BatchComposer(CONDITIONS["F"], data.records, 64, np.random.default_rng(0), None)


# --------------------------------------------------------------- loop

MINI = {k: v for k, v in ModelConfig.miniature().to_dict().items() if k not in ("use_echo", "use_domain")}


def mini_train_config(**kw):
    base = dict(condition="F", batch_size=8, lr=0.01, epochs=2, seed=0, model=dict(MINI), validate=False,
                max_steps=3)
    base.update(kw)
    return TrainConfig(**base)


def test_epoch_zero_losses_reproducible():
    data = fake_data(16, 16)
    a = train(mini_train_config(), data)
    b = train(mini_train_config(), data)
    la = [h["loss"] for h in a.history if h["type"] == "batch"]
    lb = [h["loss"] for h in b.history if h["type"] == "batch"]
    assert la == lb and len(la) == 3


def test_training_log_records(tmp_path):
    data = fake_data(16, 16)
    cfg = mini_train_config(max_steps=None, epochs=3)
    res = train(cfg, data, tmp_path)
    lines = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    batches = [l for l in lines if l["type"] == "batch"]
    epochs = [l for l in lines if l["type"] == "epoch"]
    assert len(epochs) == 3
    for b in batches:
        assert {"loss", "seld", "domain", "echo", "grl_lambda", "lr", "wall_time"} <= set(b)
        assert b["n_anechoic"] == b["n_reverberant"] == 4 and b["echo_pairing_ok"]
    sched = cfg.schedule
    assert [e["grl_lambda"] for e in epochs] == [grl_lambda(i, sched) for i in range(3)]
    assert (tmp_path / "final.npz").exists() and res.checkpoints["final"]


def test_divergence_aborts():
    data = fake_data(8, 8)
    data.records["Train-anec"][0].features[:] = np.nan
    data.records["Train-rev"][0].features[:] = np.nan
    with pytest.raises(DivergenceError):
        train(mini_train_config(max_steps=None), data)


def test_missing_split_for_condition():
    data = fake_data()
    del data.records["Train-rev"]
    with pytest.raises(ConfigError, match="Train-rev"):
        train(mini_train_config(), data)


def test_train_config_round_trip():
    cfg = mini_train_config(weights=LossWeights(echo=0.5))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
