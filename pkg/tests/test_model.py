import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from earseld.errors import ShapeError
from earseld.model import (
    EARNet,
    ModelConfig,
    crop_echo_frames,
    grl,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def full_model():
    torch.manual_seed(0)
    return EARNet(ModelConfig()).eval()


def test_default_config_dimensions():
    cfg = ModelConfig()
    assert cfg.feature_dim == 128
    assert cfg.refined_dim == 512
    assert cfg.echo_bottleneck == (4, 14, 4)
    assert cfg.time_reduction == 5


def test_scene_frames_pool_to_label_rate(full_model):
    x = torch.randn(1, 7, 998, 64)
    echo = torch.randn(1, 7, 224, 64)
    with torch.no_grad():
        out = full_model(x, echo)
    assert out["f"].shape == (1, 998 // 5, 128) == (1, 199, 128)
    assert out["f_refined"].shape == (1, 199, 512)
    assert out["sed"].shape == (1, 199, 12)
    assert out["doa"].shape == (1, 199, 36)
    assert out["z"].shape == (1, 16)
    assert out["echo_recon"].shape == echo.shape
    assert float(out["sed"].min()) >= 0 and float(out["sed"].max()) <= 1
    assert float(out["doa"].abs().max()) <= 1


def test_echo_bottleneck_shape(full_model):
    x = torch.randn(2, 7, 224, 64)
    h = x
    for block in full_model.G.encoder:
        h = block(h)
    assert h.shape == (2, 4, 14, 4)
    assert full_model.G.to_z.in_features == 4 * 14 * 4 == 224


def test_refiner_input_width(full_model):
    assert full_model.R.input_dim == 128 + 16 == 144
    assert full_model.R.rnn.input_size == 144


def test_zero_features_give_time_constant_f(full_model):
    with torch.no_grad():
        f = full_model.extract(torch.zeros(1, 7, 100, 64))
    assert torch.equal(f, f[:, :1].expand_as(f))


def test_batch_items_independent_in_eval(full_model):
    x = torch.randn(3, 7, 100, 64)
    echo = torch.randn(3, 7, 224, 64)
    with torch.no_grad():
        together = full_model(x, echo)["sed"]
        alone = torch.cat([full_model(x[i:i + 1], echo[i:i + 1])["sed"] for i in range(3)])
    torch.testing.assert_close(together, alone, rtol=1e-5, atol=1e-6)


def test_inference_deterministic(full_model):
    x = torch.randn(1, 7, 50, 64)
    echo = torch.randn(1, 7, 224, 64)
    with torch.no_grad():
        a = full_model(x, echo)
        b = full_model(x, echo)
    for k in ("z", "sed", "doa"):
        assert torch.equal(a[k], b[k])


def test_refined_output_depends_on_z():
    model = EARNet(ModelConfig.miniature()).double().eval()
    f = torch.randn(1, 4, model.cfg.feature_dim, dtype=torch.float64)
    z1 = torch.randn(1, 4, dtype=torch.float64)
    z2 = z1 + 0.5
    with torch.no_grad():
        diff = model.refine(f, z1) - model.refine(f, z2)
    assert float(diff.norm()) > 0


def test_zero_heads_give_half_and_zero():
    model = EARNet(ModelConfig.miniature()).eval()
    for head in (model.C, model.D):
        for p in head.parameters():
            torch.nn.init.zeros_(p)
    sed, doa = model.heads(torch.randn(2, 5, model.cfg.refined_dim))
    assert torch.all(sed == 0.5) and torch.all(doa == 0)
    assert sed.shape[-1] == 2 and doa.shape[-1] == 6


def test_sed_monotone_in_logit():
    model = EARNet(ModelConfig.miniature()).eval()
    f = torch.randn(1, 3, model.cfg.refined_dim)
    with torch.no_grad():
        base = model.heads(f)[0][0, 1, 0]
        model.C.fc2.bias[0] += 1.0
        raised = model.heads(f)[0][0, 1, 0]
    assert raised > base


def test_domain_output_range_and_permutation_invariance():
    model = EARNet(ModelConfig.miniature()).double().eval()
    f = torch.randn(3, 6, model.cfg.refined_dim, dtype=torch.float64) * 5
    d = model.classify_domain(f)
    perm = torch.randperm(6)
    d_perm = model.classify_domain(f[:, perm])
    assert torch.all((d > 0) & (d < 1))
    torch.testing.assert_close(d, d_perm, rtol=0, atol=1e-12)


def test_constant_sequence_pools_to_itself():
    model = EARNet(ModelConfig.miniature()).double().eval()
    v = torch.randn(1, 1, model.cfg.refined_dim, dtype=torch.float64)
    torch.testing.assert_close(model.classify_domain(v.expand(1, 7, -1)), model.classify_domain(v))


def test_domain_only_in_training_graph():
    model = EARNet(ModelConfig.miniature())
    x, echo = torch.randn(2, 7, 20, 16), torch.randn(2, 7, 32, 16)
    assert "domain" in model.train()(x, echo)
    assert "domain" not in model.eval()(x, echo)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(0, 2**31 - 1))
def test_grl_identity_forward_reversed_backward(lam, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    up = torch.randn(4, 5, generator=g, dtype=torch.float64)
    y = grl(x, lam)
    assert torch.equal(y, x)
    y.backward(up)
    assert torch.equal(x.grad, up * -lam)


def test_grl_examples():
    x = torch.ones(1, dtype=torch.float64, requires_grad=True)
    grl(x, 0.01).backward(torch.ones(1, dtype=torch.float64))
    assert x.grad.item() == -0.01
    x.grad = None
    grl(x, 0.0).backward(torch.ones(1, dtype=torch.float64))
    assert x.grad.item() == 0.0
    with pytest.raises(ValueError):
        grl(x, -1.0)


def test_parameter_partition_is_exact():
    model = EARNet(ModelConfig.miniature())
    parts = model.partition()
    assert set(parts) == {"F", "G", "R", "C", "D", "H"}
    ids = [id(p) for ps in parts.values() for p in ps]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(p) for p in model.parameters()}


def test_domain_classifier_grads_only_from_domain_loss():
    model = EARNet(ModelConfig.miniature()).double().train()
    x, echo = torch.randn(2, 7, 20, 16, dtype=torch.float64), torch.randn(2, 7, 32, 16, dtype=torch.float64)
    out = model(x, echo, grl_lambda=0.5)
    (out["sed"].sum() + out["doa"].sum() + out["echo_recon"].sum()).backward(retain_graph=True)
    assert all(p.grad is None for p in model.H.parameters())
    out["domain"].sum().backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in model.H.parameters())


def test_condition_variants_without_echo_or_domain():
    model = EARNet(ModelConfig.miniature(use_echo=False, use_domain=False)).eval()
    out = model(torch.randn(1, 7, 20, 16))
    assert "z" not in out and "domain" not in out
    assert model.R.input_dim == model.cfg.feature_dim
    with pytest.raises(ShapeError):
        model.encode_echo(torch.randn(1, 7, 32, 16))


def test_shape_errors():
    model = EARNet(ModelConfig.miniature()).eval()
    with pytest.raises(ShapeError):
        model(torch.randn(1, 7, 20, 15), torch.randn(1, 7, 32, 16))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 7, 20, 16), torch.randn(1, 7, 30, 16))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 7, 20, 16))
    with pytest.raises(ShapeError):
        ModelConfig(echo_frames=232)


def test_crop_echo_frames():
    v = np.arange(233, dtype=float)[None, :, None] * np.ones((7, 1, 64))
    c = crop_echo_frames(v, 224)
    assert c.shape == (7, 224, 64) and c[0, 0, 0] == 4.0
    p = crop_echo_frames(v[:, :220], 224)
    assert p.shape == (7, 224, 64) and p[0, 0, 0] == 0 and p[0, 2, 0] == 0.0 and p[0, 3, 0] == 1.0


def test_checkpoint_round_trip(tmp_path):
    model = EARNet(ModelConfig.miniature()).double().eval()
    save_checkpoint(tmp_path / "m.npz", model, stats={"scene": None}, seeds={"torch": 0}, extra={"epoch": 3})
    back, meta = load_checkpoint(tmp_path / "m.npz")
    assert meta["extra"]["epoch"] == 3 and meta["seeds"] == {"torch": 0}
    assert back.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    x, echo = torch.randn(1, 7, 20, 16, dtype=torch.float64), torch.randn(1, 7, 32, 16, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(model(x, echo)["sed"], back(x, echo)["sed"])
