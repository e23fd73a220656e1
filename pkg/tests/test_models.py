import numpy as np
import pytest
import torch

from dabeam.errors import ConfigurationError, DataError
from dabeam.models import (
    Discriminator,
    Generator,
    Mlp,
    MlpSpec,
    Regressor,
    discriminator_spec,
    flatten_params,
    generator_spec,
    init_params,
    load_checkpoint,
    regressor_fn,
    regressor_spec,
    save_checkpoint,
)


def n_params(m):
    return sum(p.numel() for p in m.parameters())


def test_default_architectures_at_d1300():
    g = Generator(generator_spec(1300))
    d = Discriminator(discriminator_spec(1300))
    f = Regressor(regressor_spec(1300))
    assert [l.out_features for l in g.mlp.layers] == [512, 512, 1300]
    assert [l.out_features for l in d.mlp.layers] == [512, 256, 1]
    assert [l.in_features for l in f.mlp.layers] == [3900, 1024, 1024, 1024]
    assert [l.out_features for l in f.mlp.layers] == [1024, 1024, 1024, 1300]
    # 1300*512+512 + 512*512+512 + 512*1300+1300
    assert n_params(g) == 1300 * 512 + 512 + 512 * 512 + 512 + 512 * 1300 + 1300


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        MlpSpec(8, (0,), 8)
    with pytest.raises(ConfigurationError):
        MlpSpec(8, (4,), 8, activation="tanh")
    with pytest.raises(ConfigurationError):
        Generator(MlpSpec(8, (4,), 9))
    with pytest.raises(ConfigurationError):
        Discriminator(MlpSpec(8, (4,), 1))
    with pytest.raises(ConfigurationError):
        Regressor(MlpSpec(8, (4,), 8))
    spec = generator_spec(8, (4, 4))
    assert MlpSpec.from_dict(spec.to_dict()) == spec


def test_he_init_statistics():
    m = init_params(MlpSpec(400, (300,), 200), seed=1, dtype=torch.float64)
    w = m.layers[0].weight.detach().numpy()
    assert w.std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)
    assert abs(w.mean()) < 0.01 * np.sqrt(2 / 400) * 10
    assert torch.all(m.layers[0].bias == 0)


def test_init_deterministic():
    a, b = init_params(MlpSpec(8, (16,), 8), 3), init_params(MlpSpec(8, (16,), 8), 3)
    np.testing.assert_array_equal(flatten_params({"a": a}), flatten_params({"b": b}))
    c = init_params(MlpSpec(8, (16,), 8), 4)
    assert not np.array_equal(flatten_params({"a": a}), flatten_params({"c": c}))


def test_generator_near_identity_and_residual():
    g = Generator(generator_spec(16, (32,)), seed=0, residual_gain=0.01)
    x = torch.randn(64, 16)
    out = g(x)
    assert out.shape == x.shape
    rel = (out - x).norm() / x.norm()
    assert 0 < rel < 0.05
    with torch.no_grad():
        g.mlp.layers[-1].weight.zero_()
    assert torch.equal(g(x), x)
    with pytest.raises(DataError):
        g(torch.randn(3, 15))


def test_discriminator_probabilities():
    d = Discriminator(discriminator_spec(8, (16,)), seed=0)
    x = torch.randn(100, 8) * 10
    p = d(x)
    assert p.shape == (100,)
    assert torch.all((p >= 0) & (p <= 1))
    torch.testing.assert_close(p, torch.sigmoid(d.logits(x)))


def test_regressor_augmentation():
    f = Regressor(regressor_spec(4, (8,)), seed=0)
    x = torch.arange(8.0).reshape(2, 4)
    src, tgt = Regressor.augment(x, "source"), Regressor.augment(x, "target")
    torch.testing.assert_close(src, torch.cat([x, x, torch.zeros_like(x)], 1))
    torch.testing.assert_close(tgt, torch.cat([x, torch.zeros_like(x), x], 1))
    torch.testing.assert_close(f.source(x), f.mlp(src))
    torch.testing.assert_close(f.target(x), f.mlp(tgt))
    with pytest.raises(DataError):
        Regressor.augment(x, "neither")


def test_regressor_slots_share_first_block():
    # zeroing the domain-specific input columns makes both slots agree
    f = Regressor(regressor_spec(4, (8,)), seed=2)
    with torch.no_grad():
        f.mlp.layers[0].weight[:, 4:] = 0
    x = torch.randn(5, 4)
    torch.testing.assert_close(f.source(x), f.target(x))


def test_checkpoint_roundtrip_bitexact(tmp_path):
    mods = {
        "F": Regressor(regressor_spec(8, (16, 16)), seed=1),
        "G_st": Generator(generator_spec(8, (16,)), seed=2),
        "D_t": Discriminator(discriminator_spec(8, (16,)), seed=3),
    }
    with torch.no_grad():
        for p in mods["F"].parameters():
            p.add_(torch.randn_like(p))
    path = save_checkpoint(tmp_path / "m.ckpt", mods, mode="da", best_step=7)
    assert path.read_bytes()[:4] == b"DACK"
    header, loaded = load_checkpoint(path)
    assert header["mode"] == "da" and header["best_step"] == 7
    assert list(loaded) == ["F", "G_st", "D_t"]
    for name in mods:
        assert type(loaded[name]) is type(mods[name])
        np.testing.assert_array_equal(flatten_params({name: loaded[name]}), flatten_params({name: mods[name]}))
    x = torch.randn(3, 8)
    assert torch.equal(loaded["F"].target(x), mods["F"].target(x))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(DataError):
        load_checkpoint(p)


def test_regressor_fn_batches():
    f = Regressor(regressor_spec(4, (8,)), seed=0)
    x = np.random.default_rng(0).standard_normal((25, 4)).astype(np.float32)
    a = regressor_fn(f, "target", batch_size=7)(x)
    with torch.no_grad():
        b = f.target(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)
    assert regressor_fn(f, "source")(np.zeros((0, 4), np.float32)).shape == (0, 4)


def test_mlp_bias_off():
    m = Mlp(MlpSpec(4, (3,), 2, bias=False))
    assert all(l.bias is None for l in m.layers)
