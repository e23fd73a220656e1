"""Joint optimization of domain maps, discriminators and the shared regressor.

Per batch, the discriminators take one step, then generators and regressor
take one step on the weighted objective of :func:`dabeam.losses.total_loss`.
The checkpoint kept is the one with the highest mean validation CNR.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import losses
from .acoustics import SOURCE, TARGET
from .aperture import FocusedTensor, LabeledDataset, apply_network
from .beamformers import das
from .errors import ConfigurationError, DataError, TrainingFault
from .evaluation import RoiPair, cnr, cr
from .losses import LossWeights
from .models import (
    Discriminator,
    Generator,
    Regressor,
    discriminator_spec,
    flatten_params,
    generator_spec,
    regressor_spec,
    regressor_fn,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    norm: str = "l1"
    generator_hidden: tuple = (512, 512)
    generator_bias: bool = True
    discriminator_hidden: tuple = (512, 256)
    regressor_hidden: tuple = (1024, 1024, 1024)
    lr_gan: float = 2e-4
    lr_regressor: float = 1e-4
    gan_betas: tuple = (0.5, 0.999)
    batch_size: int = 64
    epochs: int = 50
    max_steps: Optional[int] = None
    eval_interval: int = 500
    log_interval: int = 100
    seed: int = 0
    deterministic: bool = True
    eval_domain: Optional[str] = None  # default: target slot if target regression is on
    record_trajectory: int = 0  # snapshot regressor params every N steps (0: off)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        for name in ("generator_hidden", "discriminator_hidden", "regressor_hidden", "gan_betas"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.norm not in losses.NORMS:
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    @property
    def slot(self):
        if self.eval_domain is not None:
            return self.eval_domain
        return TARGET if self.weights.regress_target > 0 else SOURCE

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        for k in ("generator_hidden", "discriminator_hidden", "regressor_hidden", "gan_betas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def component_seeds(seed: int) -> dict:
    """Independent integer seeds for every randomized component."""
    names = ("F", "G_st", "G_ts", "D_s", "D_t", "source_order", "target_order")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


class DomainModels(nn.Module):
    def __init__(self, d: int, config: TrainConfig):
        super().__init__()
        seeds = component_seeds(config.seed)
        self.F = make_regressor(d, config)
        self.G_st = Generator(generator_spec(d, config.generator_hidden, config.generator_bias), seeds["G_st"])
        self.G_ts = Generator(generator_spec(d, config.generator_hidden, config.generator_bias), seeds["G_ts"])
        self.D_s = Discriminator(discriminator_spec(d, config.discriminator_hidden), seeds["D_s"])
        self.D_t = Discriminator(discriminator_spec(d, config.discriminator_hidden), seeds["D_t"])

    def named_components(self):
        return {"F": self.F, "G_st": self.G_st, "G_ts": self.G_ts, "D_s": self.D_s, "D_t": self.D_t}


def make_regressor(d: int, config: TrainConfig) -> Regressor:
    return Regressor(regressor_spec(d, config.regressor_hidden), component_seeds(config.seed)["F"])


def _set_determinism(config: TrainConfig):
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


class _BatchStream:
    """Endless seeded reshuffling over ``n`` rows."""

    def __init__(self, n, batch_size, seed):
        self.n, self.batch_size = n, batch_size
        self.rng = np.random.default_rng(seed)
        self.order, self.pos, self.epoch = self.rng.permutation(n), 0, 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
            self.epoch += 1
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def _num_steps(config: TrainConfig, n_source: int) -> int:
    per_epoch = max(n_source // config.batch_size, 1)
    steps = config.epochs * per_epoch
    if config.max_steps is not None:
        steps = min(steps, config.max_steps)
    return steps


@dataclass
class ValidationFrame:
    tensor: FocusedTensor
    roi: RoiPair
    frame_id: str = ""


def beamform_envelope(tensor: FocusedTensor, F: Regressor, domain: str, kernel_depths: int) -> np.ndarray:
    """Full-field network beamforming: windows -> F -> overlap average -> DAS -> |.|."""
    out = apply_network(tensor, regressor_fn(F, domain), kernel_depths)
    return np.abs(das(out))


def validate(F, frames: Sequence[ValidationFrame], domain: str, kernel_depths: int) -> dict:
    cnrs, crs = [], []
    for vf in frames:
        env = beamform_envelope(vf.tensor, F, domain, kernel_depths)
        cnrs.append(cnr(env, vf.tensor.grid, vf.roi))
        crs.append(cr(env, vf.tensor.grid, vf.roi))
    return {"val_cnr": float(np.mean(cnrs)), "val_cr": float(np.mean(crs))}


@dataclass
class TrainResult:
    models: nn.Module  # best-validation snapshot (final state when no validation)
    final_models: nn.Module
    best_step: int
    best_val_cnr: Optional[float]
    log: list
    trajectory: list
    config: TrainConfig

    @property
    def regressor(self) -> Regressor:
        return self.models.F

    def write_log(self, path):
        with open(path, "w") as f:
            for rec in self.log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _to_tensor(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _check_dataset(source: LabeledDataset, target: Optional[LabeledDataset], need_target: bool):
    if source.y is None:
        raise DataError("source dataset must be labeled")
    if source.domain_tag != SOURCE:
        raise DataError("source dataset is not tagged source")
    if need_target:
        if target is None or len(target) == 0:
            raise DataError("domain-adaptive training needs an unlabeled target dataset")
        if target.dim != source.dim:
            raise DataError("source and target sample dimensions differ")


class _Selector:
    """Tracks the best validation CNR and snapshots the winning models."""

    def __init__(self, frames, slot, kernel_depths):
        self.frames, self.slot, self.kernel_depths = frames, slot, kernel_depths
        self.best, self.best_step, self.snapshot = -np.inf, 0, None

    def __call__(self, models, step, records):
        if not self.frames:
            return
        metrics = validate(models.F, self.frames, self.slot, self.kernel_depths)
        records.append({"step": step, "kind": "validation", **metrics})
        log.info("step %d validation CNR %.3f dB CR %.3f dB", step, metrics["val_cnr"], metrics["val_cr"])
        if metrics["val_cnr"] > self.best:
            self.best, self.best_step = metrics["val_cnr"], step
            self.snapshot = copy.deepcopy(models)


def train(
    config: TrainConfig,
    source: LabeledDataset,
    target: Optional[LabeledDataset] = None,
    validation: Sequence[ValidationFrame] = (),
) -> TrainResult:
    """Jointly train ``G_st, G_ts, D_s, D_t`` and the shared regressor ``F``.

    With GAN and target-regression weights at zero this is exactly the
    source-only regression of :func:`train_baseline`.
    """
    _set_determinism(config)
    w = config.weights
    need_target = w.uses_gan or w.regress_target > 0
    _check_dataset(source, target, need_target)
    seeds = component_seeds(config.seed)
    models = DomainModels(source.dim, config)
    xs_all, ys_all = _to_tensor(source.x), _to_tensor(source.y)
    xt_all = _to_tensor(target.x) if need_target else None

    opt_f = torch.optim.Adam(models.F.parameters(), lr=config.lr_regressor)
    gen_params = list(models.G_st.parameters()) + list(models.G_ts.parameters())
    disc_params = list(models.D_s.parameters()) + list(models.D_t.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.lr_gan, betas=config.gan_betas)
    opt_d = torch.optim.Adam(disc_params, lr=config.lr_gan, betas=config.gan_betas)

    src_stream = _BatchStream(len(source), config.batch_size, seeds["source_order"])
    tgt_stream = _BatchStream(len(target), config.batch_size, seeds["target_order"]) if need_target else None
    steps = _num_steps(config, len(source))
    select = _Selector(validation, config.slot, source.kernel_depths)
    records, trajectory = [], []
    train_gan = w.uses_gan
    train_target_slot = w.regress_target > 0

    for step in range(1, steps + 1):
        idx = src_stream.next()
        batch = {"x_s": xs_all[idx], "y_s": ys_all[idx]}
        batch["x_t"] = xt_all[tgt_stream.next()] if need_target else batch["x_s"]
        d_terms = {}

        if train_gan and (w.adv_source_to_target or w.adv_target_to_source):
            for p in disc_params:
                p.requires_grad_(True)
            opt_d.zero_grad(set_to_none=True)
            with torch.no_grad():
                fake_t = models.G_st(batch["x_s"])
                fake_s = models.G_ts(batch["x_t"])
            d_loss = 0.0
            if w.adv_source_to_target:
                d_terms["disc_t"] = losses.discriminator_loss(models.D_t(batch["x_t"]), models.D_t(fake_t))
                d_terms["r1_t"] = losses.r1_penalty(models.D_t, batch["x_t"], w.r1_gamma)
                d_loss = d_loss + w.adv_source_to_target * (d_terms["disc_t"] + d_terms["r1_t"])
            if w.adv_target_to_source:
                d_terms["disc_s"] = losses.discriminator_loss(models.D_s(batch["x_s"]), models.D_s(fake_s))
                d_terms["r1_s"] = losses.r1_penalty(models.D_s, batch["x_s"], w.r1_gamma)
                d_loss = d_loss + w.adv_target_to_source * (d_terms["disc_s"] + d_terms["r1_s"])
            losses.check_finite(d_terms, step)
            d_loss.backward()
            opt_d.step()
            for p in disc_params:
                p.requires_grad_(False)

        opt_f.zero_grad(set_to_none=True)
        if train_gan:
            opt_g.zero_grad(set_to_none=True)
        try:
            total, terms = losses.total_loss(models, batch, w, config.norm)
        except TrainingFault as fault:
            raise TrainingFault(fault.term, fault.value, step) from None
        total.backward()
        if train_gan:
            opt_g.step()
        opt_f.step()

        if config.log_interval and (step % config.log_interval == 0 or step == steps):
            rec = {"step": step, "epoch": src_stream.epoch, "kind": "train", "total": float(total.detach())}
            rec.update({k: float(v.detach()) for k, v in terms.items()})
            rec.update({k: float(v.detach()) for k, v in d_terms.items()})
            records.append(rec)
        if config.record_trajectory and step % config.record_trajectory == 0:
            trajectory.append(flatten_params({"F": models.F}))
        if config.eval_interval and (step % config.eval_interval == 0 or step == steps):
            select(models, step, records)
        elif step == steps:
            select(models, step, records)

    if not train_target_slot and not train_gan:
        log.debug("trained source regressor only (baseline objective)")
    best = select.snapshot if select.snapshot is not None else models
    return TrainResult(
        models=best,
        final_models=models,
        best_step=select.best_step if select.snapshot is not None else steps,
        best_val_cnr=None if select.snapshot is None else float(select.best),
        log=records,
        trajectory=trajectory,
        config=config,
    )


def train_baseline(
    config: TrainConfig, source: LabeledDataset, validation: Sequence[ValidationFrame] = ()
) -> TrainResult:
    """Conventional DNN: minimize the source regression loss only.

    Uses the same seeds, batch order and optimizer settings for ``F`` as
    :func:`train`, without any domain maps.
    """
    _set_determinism(config)
    _check_dataset(source, None, False)
    d = source.dim
    F = make_regressor(d, config)
    holder = nn.Module()
    holder.F = F
    opt = torch.optim.Adam(F.parameters(), lr=config.lr_regressor)
    stream = _BatchStream(len(source), config.batch_size, component_seeds(config.seed)["source_order"])
    xs_all, ys_all = _to_tensor(source.x), _to_tensor(source.y)
    steps = _num_steps(config, len(source))
    slot = config.eval_domain or SOURCE
    select = _Selector(validation, slot, source.kernel_depths)
    records, trajectory = [], []
    for step in range(1, steps + 1):
        idx = stream.next()
        opt.zero_grad(set_to_none=True)
        loss = losses.loss_fs(F, xs_all[idx], ys_all[idx], config.norm)
        losses.check_finite({"fs": loss}, step)
        loss.backward()
        opt.step()
        if config.log_interval and (step % config.log_interval == 0 or step == steps):
            records.append({"step": step, "epoch": stream.epoch, "kind": "train", "total": float(loss.detach()), "fs": float(loss.detach())})
        if config.record_trajectory and step % config.record_trajectory == 0:
            trajectory.append(flatten_params({"F": F}))
        if (config.eval_interval and step % config.eval_interval == 0) or step == steps:
            select(holder, step, records)
    best = select.snapshot if select.snapshot is not None else holder
    return TrainResult(
        models=best,
        final_models=holder,
        best_step=select.best_step if select.snapshot is not None else steps,
        best_val_cnr=None if select.snapshot is None else float(select.best),
        log=records,
        trajectory=trajectory,
        config=config,
    )
