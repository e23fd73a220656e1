"""Loss terms for joint domain-map and regressor training.

Regression and cycle norms are elementwise means (mean absolute error for
``l1``), so the relative loss weights do not depend on the sample dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch.nn import functional as nnf

from .errors import ConfigurationError, TrainingFault

EPS = 1e-7
NORMS = ("l1", "l2", "huber")


@dataclass(frozen=True)
class LossWeights:
    adv_source_to_target: float = 2.0  # lambda_s
    adv_target_to_source: float = 1.0  # lambda_t
    cycle: float = 10.0  # lambda_c
    regress_source: float = 1.0  # lambda_FS
    regress_target: float = 1.0  # lambda_FT
    r1_gamma: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigurationError(f"loss weight {k} must be nonnegative, got {v}")

    @classmethod
    def baseline(cls, **kw):
        """Source regression only: the conventional DNN objective."""
        return cls(adv_source_to_target=0.0, adv_target_to_source=0.0, cycle=0.0, regress_target=0.0, **kw)

    @property
    def uses_gan(self):
        return any(w > 0 for w in (self.adv_source_to_target, self.adv_target_to_source, self.cycle))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def regression_norm(pred, target, norm="l1", huber_delta=1.0):
    if norm == "l1":
        return (pred - target).abs().mean()
    if norm == "l2":
        return ((pred - target) ** 2).mean()
    if norm == "huber":
        return nnf.huber_loss(pred, target, delta=huber_delta)
    raise ConfigurationError(f"unknown regression norm {norm!r}; choose from {NORMS}")


def _clamp(p):
    return p.clamp(EPS, 1 - EPS)


def loss_adv(G, D, x_real, x_source):
    """Adversarial losses for the map ``G`` judged by ``D``.

    Returns ``(d_loss, g_loss)``: ``-mean log D(real) - mean log(1 - D(G(x)))``
    with the fakes detached, and the non-saturating ``-mean log D(G(x))``.
    """
    fake = G(x_source)
    p_real = _clamp(D(x_real))
    p_fake_d = _clamp(D(fake.detach()))
    d_loss = -torch.log(p_real).mean() - torch.log(1 - p_fake_d).mean()
    g_loss = -torch.log(_clamp(D(fake))).mean()
    return d_loss, g_loss


def discriminator_loss(p_real, p_fake):
    """Discriminator term from precomputed probabilities."""
    return -torch.log(_clamp(p_real)).mean() - torch.log(1 - _clamp(p_fake)).mean()


def generator_adv_loss(p_fake):
    return -torch.log(_clamp(p_fake)).mean()


def loss_cyc(G_st, G_ts, x_s, x_t):
    return (G_ts(G_st(x_s)) - x_s).abs().mean() + (G_st(G_ts(x_t)) - x_t).abs().mean()


def loss_fs(F, x_s, y_s, norm="l1"):
    return regression_norm(F.source(x_s), y_s, norm)


def loss_ft1(F, G_st, x_s, y_s, norm="l1", detach_maps=True):
    """Target regressor on generated target pairs ``(G(x_s), G(y_s))``.

    With ``detach_maps`` the generator outputs are constants, so this term
    trains only the regressor.
    """
    if detach_maps:
        with torch.no_grad():
            gx, gy = G_st(x_s), G_st(y_s)
    else:
        gx, gy = G_st(x_s), G_st(y_s).detach()
    return regression_norm(F.target(gx), gy, norm)


def ft2_pseudo_label(F, G_st, G_ts, x_t):
    with torch.no_grad():
        return G_st(F.source(G_ts(x_t)))


def loss_ft2(F, G_st, G_ts, x_t, norm="l1"):
    """Target regressor on real target inputs against the detached pseudo-label
    ``G_st(F_s(G_ts(x_t)))``."""
    return regression_norm(F.target(x_t), ft2_pseudo_label(F, G_st, G_ts, x_t), norm)


def r1_penalty(D, x_real, gamma=10.0):
    """``gamma / 2 * mean ||grad_x D(x)||^2`` over real samples, differentiable in D."""
    if gamma == 0:
        return x_real.new_zeros(())
    x = x_real.detach().requires_grad_(True)
    out = D(x).sum()
    (grad,) = torch.autograd.grad(out, x, create_graph=True)
    return 0.5 * gamma * grad.pow(2).sum(dim=-1).mean()


TERMS = ("adv_st", "adv_ts", "cycle", "fs", "ft1", "ft2")


def weighted_sum(terms: dict, weights: LossWeights):
    """Generator/regressor objective from individual term values."""
    total = 0.0
    pairs = (
        (weights.adv_source_to_target, "adv_st"),
        (weights.adv_target_to_source, "adv_ts"),
        (weights.cycle, "cycle"),
        (weights.regress_source, "fs"),
        (weights.regress_target, "ft1"),
        (weights.regress_target, "ft2"),
    )
    for w, name in pairs:
        if w != 0:
            total = total + w * terms[name]
    return total


def check_finite(terms: dict, step=None, limit=1e6):
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v) or abs(v) > limit:
            raise TrainingFault(name, v, step)


def total_loss(models, batch, weights: LossWeights, norm="l1"):
    """Weighted generator+regressor objective and its per-term breakdown.

    ``models`` needs attributes ``G_st, G_ts, D_s, D_t, F``; ``batch`` holds
    ``x_s, y_s, x_t``. Terms with zero weight are skipped (reported as 0).
    Raises :class:`TrainingFault` naming any non-finite term.
    """
    x_s, y_s, x_t = batch["x_s"], batch["y_s"], batch["x_t"]
    terms = {}
    zero = x_s.new_zeros(())
    if weights.adv_source_to_target or weights.cycle:
        fake_t = models.G_st(x_s)
    if weights.adv_target_to_source or weights.cycle:
        fake_s = models.G_ts(x_t)
    terms["adv_st"] = generator_adv_loss(models.D_t(fake_t)) if weights.adv_source_to_target else zero
    terms["adv_ts"] = generator_adv_loss(models.D_s(fake_s)) if weights.adv_target_to_source else zero
    if weights.cycle:
        terms["cycle"] = (models.G_ts(fake_t) - x_s).abs().mean() + (models.G_st(fake_s) - x_t).abs().mean()
    else:
        terms["cycle"] = zero
    terms["fs"] = loss_fs(models.F, x_s, y_s, norm) if weights.regress_source else zero
    if weights.regress_target:
        terms["ft1"] = loss_ft1(models.F, models.G_st, x_s, y_s, norm)
        terms["ft2"] = loss_ft2(models.F, models.G_st, models.G_ts, x_t, norm)
    else:
        terms["ft1"] = terms["ft2"] = zero
    check_finite(terms)
    total = weighted_sum(terms, weights)
    if not torch.is_tensor(total):
        total = zero
    return total, terms
