import copy
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dabeam import losses
from dabeam.errors import ConfigurationError, TrainingFault
from dabeam.losses import LossWeights
from dabeam.models import Discriminator, Generator, MlpSpec, Regressor, discriminator_spec, generator_spec, regressor_spec

from .gradcheck import fd_relative_error

D = 8
F64 = torch.float64


class Fn(torch.nn.Module):
    """Wrap a callable as a parameter-free map."""

    def __init__(self, f):
        super().__init__()
        self.f = f

    def forward(self, x):
        return self.f(x)


class FakeRegressor:
    def __init__(self, fs, ft):
        self.source, self.target = fs, ft


def toy_models(seed=0, residual_gain=1.0):
    """Networks with well under 10^3 parameters each, in double precision."""
    return SimpleNamespace(
        G_st=Generator(generator_spec(D, (16,)), seed, residual_gain, dtype=F64),
        G_ts=Generator(generator_spec(D, (16,)), seed + 1, residual_gain, dtype=F64),
        D_s=Discriminator(discriminator_spec(D, (16,)), seed + 2, dtype=F64),
        D_t=Discriminator(discriminator_spec(D, (16,)), seed + 3, dtype=F64),
        F=Regressor(regressor_spec(D, (16,)), seed + 4, dtype=F64),
    )


def toy_batch(seed=0, n=32):
    g = torch.Generator().manual_seed(seed)
    x_s = torch.randn(n, D, generator=g, dtype=F64)
    accept = (torch.arange(n) % 2 == 0)[:, None]
    y_s = torch.where(accept, x_s, torch.zeros_like(x_s))
    x_t = 1.5 * torch.randn(n, D, generator=g, dtype=F64) + 0.3
    return {"x_s": x_s, "y_s": y_s, "x_t": x_t}


def test_toy_networks_are_small():
    m = toy_models()
    for name in ("G_st", "G_ts", "D_s", "D_t", "F"):
        assert sum(p.numel() for p in getattr(m, name).parameters()) <= 1000


# -- closed-form oracles ----------------------------------------------------------
def half_discriminator():
    d = Discriminator(discriminator_spec(D, (16,)), 0, dtype=F64)
    with torch.no_grad():
        d.mlp.layers[-1].weight.zero_()
        d.mlp.layers[-1].bias.zero_()
    return d


def test_discriminator_loss_at_half():
    b = toy_batch()
    d_loss, g_loss = losses.loss_adv(Fn(lambda x: x + 1), half_discriminator(), b["x_t"], b["x_s"])
    assert d_loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert g_loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_perfect_discriminator_clamped():
    loss = losses.discriminator_loss(torch.ones(10, dtype=F64), torch.zeros(10, dtype=F64))
    assert loss.item() == pytest.approx(2 * losses.EPS, rel=1e-3)
    assert torch.isfinite(losses.generator_adv_loss(torch.zeros(3, dtype=F64)))


def test_generator_loss_monotone():
    p = torch.linspace(0.01, 0.99, 50, dtype=F64)
    vals = torch.stack([losses.generator_adv_loss(v[None]) for v in p])
    assert torch.all(vals[1:] < vals[:-1])


def test_cycle_oracles():
    b = toy_batch()
    ident = Fn(lambda x: x)
    assert losses.loss_cyc(ident, ident, b["x_s"], b["x_t"]).item() == 0.0
    g = Generator(generator_spec(D, (16,)), 0, dtype=F64)
    with torch.no_grad():
        g.mlp.layers[-1].weight.zero_()
    assert losses.loss_cyc(g, g, b["x_s"], b["x_t"]).item() == 0.0
    c = 0.37
    inv = losses.loss_cyc(Fn(lambda x: x + c), Fn(lambda x: x - c), b["x_s"], b["x_t"])
    assert inv.item() == pytest.approx(0.0, abs=1e-14)
    dbl = losses.loss_cyc(Fn(lambda x: 2 * x), ident, b["x_s"], b["x_t"])
    assert dbl.item() == pytest.approx((b["x_s"].abs().mean() + b["x_t"].abs().mean()).item(), rel=1e-12)


def test_fs_oracles():
    b = toy_batch()
    exact = FakeRegressor(lambda x: torch.where((torch.arange(len(x)) % 2 == 0)[:, None], x, 0 * x), None)
    assert losses.loss_fs(exact, b["x_s"], b["y_s"]).item() == 0.0
    zero = FakeRegressor(lambda x: torch.zeros_like(x), None)
    x = b["x_s"]
    # accept-only batch: mean absolute value of x
    assert losses.loss_fs(zero, x, x).item() == pytest.approx(x.abs().mean().item(), rel=1e-12)
    assert losses.loss_fs(zero, x, torch.zeros_like(x)).item() == 0.0
    assert losses.loss_fs(zero, x, x, norm="l2").item() == pytest.approx((x**2).mean().item(), rel=1e-12)


def test_ft1_oracles():
    b = toy_batch()
    x = b["x_s"]
    ident = Fn(lambda v: v)
    assert losses.loss_ft1(FakeRegressor(None, lambda v: v), ident, x, x).item() == 0.0
    shift = Fn(lambda v: v + 0.25)
    assert losses.loss_ft1(FakeRegressor(None, lambda v: v), shift, x, x).item() == pytest.approx(0.0, abs=1e-15)


def test_ft2_oracles():
    b = toy_batch()
    x_t = b["x_t"]
    ident = Fn(lambda v: v)
    same = FakeRegressor(lambda v: 0.5 * v, lambda v: 0.5 * v)
    assert losses.loss_ft2(same, ident, ident, x_t).item() == 0.0
    c = 0.5
    f = FakeRegressor(lambda v: v, lambda v: 3 * v)
    got = losses.loss_ft2(f, Fn(lambda v: v + c), Fn(lambda v: v - c), x_t)
    assert got.item() == pytest.approx((3 * x_t - x_t).abs().mean().item(), rel=1e-12)
    zero = FakeRegressor(lambda v: 0 * v, lambda v: 0 * v)
    assert losses.loss_ft2(zero, ident, ident, x_t).item() == 0.0


def test_r1_oracles():
    b = toy_batch()
    x = b["x_t"]
    assert losses.r1_penalty(half_discriminator(), x, 10.0).item() == 0.0
    d = Discriminator(discriminator_spec(D, (16,)), 5, dtype=F64)
    assert losses.r1_penalty(d, x, 0.0).item() == 0.0
    # single linear layer: grad_x sigmoid(w.x + b) = sigma'(w.x + b) w
    lin = Discriminator(MlpSpec(D, (), 1, output_activation="sigmoid"), 1, dtype=F64)
    w = lin.mlp.layers[0].weight.detach()[0]
    with torch.no_grad():
        lin.mlp.layers[0].bias.fill_(0.2)
    z = x @ w + 0.2
    s = torch.sigmoid(z)
    expected = 5.0 * torch.mean((s * (1 - s)) ** 2 * w.dot(w))
    assert losses.r1_penalty(lin, x, 10.0).item() == pytest.approx(expected.item(), rel=1e-12)


def test_r1_matches_finite_difference_input_gradient():
    d = Discriminator(discriminator_spec(D, (16,)), 7, dtype=F64)
    x = toy_batch()["x_t"][:6]
    eps = 1e-6
    grads = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.shape[0]):
            for j in range(D):
                e = torch.zeros_like(x)
                e[i, j] = eps
                grads[i, j] = (d(x + e)[i] - d(x - e)[i]) / (2 * eps)
    expected = 0.5 * 10 * grads.pow(2).sum(1).mean()
    assert losses.r1_penalty(d, x, 10.0).item() == pytest.approx(expected.item(), rel=1e-6)


def test_weighted_sum_oracle():
    unit = {"adv_st": 1.0, "adv_ts": 1.0, "cycle": 1.0, "fs": 1.0, "ft1": 0.5, "ft2": 0.5}
    # L_FT = L_FT1 + L_FT2 = 1
    assert losses.weighted_sum(unit, LossWeights()) == pytest.approx(15.0, abs=1e-6)
    zero = LossWeights(0, 0, 0, 0, 0)
    assert losses.weighted_sum(unit, zero) == 0.0
    ones = {k: 1.0 for k in unit}
    assert losses.weighted_sum(ones, LossWeights()) == pytest.approx(16.0)


def test_total_loss_is_sum_of_terms():
    m, b = toy_models(), toy_batch()
    w = LossWeights()
    total, terms = losses.total_loss(m, b, w, "l1")
    manual = (
        2 * losses.generator_adv_loss(m.D_t(m.G_st(b["x_s"])))
        + 1 * losses.generator_adv_loss(m.D_s(m.G_ts(b["x_t"])))
        + 10 * losses.loss_cyc(m.G_st, m.G_ts, b["x_s"], b["x_t"])
        + losses.loss_fs(m.F, b["x_s"], b["y_s"])
        + losses.loss_ft1(m.F, m.G_st, b["x_s"], b["y_s"])
        + losses.loss_ft2(m.F, m.G_st, m.G_ts, b["x_t"])
    )
    assert total.item() == pytest.approx(manual.item(), rel=1e-6)
    assert set(terms) == set(losses.TERMS)
    zero_total, zero_terms = losses.total_loss(m, b, LossWeights(0, 0, 0, 0, 0), "l1")
    assert zero_total.item() == 0.0
    base_total, base_terms = losses.total_loss(m, b, LossWeights.baseline(), "l1")
    assert base_total.item() == pytest.approx(losses.loss_fs(m.F, b["x_s"], b["y_s"]).item())
    assert base_terms["adv_st"].item() == 0.0


@given(st.integers(0, 1000), st.sampled_from(losses.NORMS))
def test_terms_nonnegative(seed, norm):
    m, b = toy_models(seed), toy_batch(seed)
    _, terms = losses.total_loss(m, b, LossWeights(), norm)
    assert all(v.item() >= 0 for v in terms.values())
    d_loss, _ = losses.loss_adv(m.G_st, m.D_t, b["x_t"], b["x_s"])
    assert d_loss.item() >= 0
    assert losses.r1_penalty(m.D_t, b["x_t"]).item() >= 0


def test_unknown_norm_and_weights():
    with pytest.raises(ConfigurationError):
        losses.regression_norm(torch.zeros(1), torch.zeros(1), "l3")
    with pytest.raises(ConfigurationError):
        LossWeights(cycle=-1.0)
    w = LossWeights.baseline()
    assert not w.uses_gan and w.regress_target == 0 and w.regress_source == 1
    assert LossWeights.from_dict(LossWeights().to_dict()) == LossWeights()


def test_check_finite_names_term():
    with pytest.raises(TrainingFault) as info:
        losses.check_finite({"fs": torch.tensor(1.0), "cycle": torch.tensor(float("nan"))}, step=3)
    assert info.value.term == "cycle" and info.value.step == 3
    with pytest.raises(TrainingFault):
        losses.check_finite({"adv_st": 2e6})
    losses.check_finite({"fs": 1e5})


# -- gradient suite ------------------------------------------------------------------
TOL = 1e-4


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_grad_fs(norm):
    m, b = toy_models(), toy_batch()
    err, gnorm = fd_relative_error(lambda: losses.loss_fs(m.F, b["x_s"], b["y_s"], norm), [m.F])
    assert gnorm > 0 and err < TOL


def test_grad_adv_discriminator_and_generator():
    m, b = toy_models(), toy_batch()
    err, gnorm = fd_relative_error(lambda: losses.loss_adv(m.G_st, m.D_t, b["x_t"], b["x_s"])[0], [m.D_t])
    assert gnorm > 0 and err < TOL
    err, gnorm = fd_relative_error(lambda: losses.loss_adv(m.G_st, m.D_t, b["x_t"], b["x_s"])[1], [m.G_st])
    assert gnorm > 0 and err < TOL


def test_grad_adv_fakes_detached_for_discriminator():
    m, b = toy_models(), toy_batch()
    d_loss, _ = losses.loss_adv(m.G_st, m.D_t, b["x_t"], b["x_s"])
    grads = torch.autograd.grad(d_loss, list(m.G_st.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


def test_grad_cycle():
    m, b = toy_models(), toy_batch()
    err, gnorm = fd_relative_error(lambda: losses.loss_cyc(m.G_st, m.G_ts, b["x_s"], b["x_t"]), [m.G_st, m.G_ts])
    assert gnorm > 0 and err < TOL


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_grad_ft1(norm):
    m, b = toy_models(), toy_batch()
    err, gnorm = fd_relative_error(lambda: losses.loss_ft1(m.F, m.G_st, b["x_s"], b["y_s"], norm), [m.F])
    assert gnorm > 0 and err < TOL


def test_ft1_detached_by_default():
    m, b = toy_models(), toy_batch()
    loss = losses.loss_ft1(m.F, m.G_st, b["x_s"], b["y_s"])
    assert all(g is None for g in torch.autograd.grad(loss, list(m.G_st.parameters()), allow_unused=True))
    # with the input branch attached, G_st gets the gradient of the F_t(G(x)) path only
    def attached():
        return losses.loss_ft1(m.F, m.G_st, b["x_s"], b["y_s"], detach_maps=False)

    # the target G(y) stays constant, so FD must hold it fixed as well
    with torch.no_grad():
        fixed = m.G_st(b["y_s"]).clone()
    err, gnorm = fd_relative_error(
        lambda: losses.regression_norm(m.F.target(m.G_st(b["x_s"])), fixed, "l1"), [m.G_st]
    )
    a = torch.autograd.grad(attached(), list(m.G_st.parameters()))
    ref = torch.autograd.grad(losses.regression_norm(m.F.target(m.G_st(b["x_s"])), fixed, "l1"),
                              list(m.G_st.parameters()))
    for x, y in zip(a, ref):
        torch.testing.assert_close(x, y)
    assert err < TOL


def frozen(module):
    c = copy.deepcopy(module)
    for p in c.parameters():
        p.requires_grad_(False)
    return c


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_grad_ft2(norm):
    # finite differences hold the pseudo-label branch at its current value
    m, b = toy_models(), toy_batch()
    label_fn = lambda F0: losses.ft2_pseudo_label(F0, m.G_st, m.G_ts, b["x_t"])
    F0 = frozen(m.F)
    fd_loss = lambda: losses.regression_norm(m.F.target(b["x_t"]), label_fn(F0), norm)
    analytic = torch.autograd.grad(losses.loss_ft2(m.F, m.G_st, m.G_ts, b["x_t"], norm), list(m.F.parameters()))
    reference = torch.autograd.grad(fd_loss(), list(m.F.parameters()))
    for x, y in zip(analytic, reference):
        torch.testing.assert_close(x, y, rtol=0, atol=0)
    err, gnorm = fd_relative_error(fd_loss, [m.F])
    assert gnorm > 0 and err < TOL


def test_ft2_detachment_contract():
    m, b = toy_models(), toy_batch()
    loss = losses.loss_ft2(m.F, m.G_st, m.G_ts, b["x_t"])
    gen = list(m.G_st.parameters()) + list(m.G_ts.parameters())
    for g in torch.autograd.grad(loss, gen, allow_unused=True):
        assert g is None or torch.all(g == 0)
    # F receives only the F_t(x_t) gradient: the pseudo-label path through F_s is constant
    label = losses.ft2_pseudo_label(m.F, m.G_st, m.G_ts, b["x_t"])
    assert not label.requires_grad
    ref = losses.regression_norm(m.F.target(b["x_t"]), label, "l1")
    got = torch.autograd.grad(losses.loss_ft2(m.F, m.G_st, m.G_ts, b["x_t"]), list(m.F.parameters()))
    want = torch.autograd.grad(ref, list(m.F.parameters()))
    for x, y in zip(got, want):
        assert torch.equal(x, y)


def test_grad_r1():
    m, b = toy_models(), toy_batch()
    err, gnorm = fd_relative_error(lambda: losses.r1_penalty(m.D_t, b["x_t"], 10.0), [m.D_t])
    assert gnorm > 0 and err < TOL


def test_grad_total():
    # reference objective with every detached branch evaluated on frozen copies
    m, b = toy_models(), toy_batch(n=16)
    w = LossWeights()
    c = SimpleNamespace(G_st=frozen(m.G_st), G_ts=frozen(m.G_ts), F=frozen(m.F))
    x_s, y_s, x_t = b["x_s"], b["y_s"], b["x_t"]

    def reference():
        fake_t, fake_s = m.G_st(x_s), m.G_ts(x_t)
        cyc = (m.G_ts(fake_t) - x_s).abs().mean() + (m.G_st(fake_s) - x_t).abs().mean()
        ft1 = losses.regression_norm(m.F.target(c.G_st(x_s)), c.G_st(y_s), "l1")
        ft2 = losses.regression_norm(m.F.target(x_t), c.G_st(c.F.source(c.G_ts(x_t))), "l1")
        return (
            2 * losses.generator_adv_loss(m.D_t(fake_t))
            + losses.generator_adv_loss(m.D_s(fake_s))
            + 10 * cyc
            + losses.regression_norm(m.F.source(x_s), y_s, "l1")
            + ft1
            + ft2
        )

    mods = [m.F, m.G_st, m.G_ts]
    params = [p for mod in mods for p in mod.parameters()]
    got = torch.autograd.grad(losses.total_loss(m, b, w, "l1")[0], params)
    want = torch.autograd.grad(reference(), params)
    for x, y in zip(got, want):
        torch.testing.assert_close(x, y, rtol=1e-10, atol=1e-12)
    err, gnorm = fd_relative_error(reference, mods)
    assert gnorm > 0 and err < TOL
