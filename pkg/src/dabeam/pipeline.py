"""End-to-end orchestration shared by the command line and the demos.

Every frame of a run is identified by ``(split, index)``; its phantom, noise
and clutter seeds derive from the run seed, so a run is reproducible from its
:class:`~dabeam.config.RunConfig` alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .acoustics import SOURCE, TARGET, ChannelFrame, PhantomSpec, add_noise, apply_domain_shift, make_phantom
from .acoustics import simulate_channel_data
from .aperture import (
    FocusedTensor,
    LabeledDataset,
    PixelGrid,
    analytic_signal,
    apply_network,
    extract_samples,
    focus,
    label_pixels,
    make_grid,
    region_labels,
)
from .beamformers import das, gcf
from .config import SPLIT_KEYS, RunConfig
from .errors import ConfigurationError, DataError
from .evaluation import RoiPair, cnr, cr, default_roi, summarize
from .losses import LossWeights
from .models import Regressor, regressor_fn
from .training import TrainConfig, TrainResult, ValidationFrame, train

log = logging.getLogger(__name__)

METHODS = ("das", "gcf", "dnn", "dadnn")
MANIFEST_SPLIT = {
    "source_train": "train",
    "source_test": "test",
    "target_train": "train",
    "target_validation": "validation",
    "target_test": "test",
}


@dataclass(frozen=True)
class FrameRecord:
    split: str  # one of config.SPLIT_KEYS
    index: int
    phantom: PhantomSpec
    domain: str
    snr_db: Optional[float]
    noise_seed: int
    clutter_seed: int

    @property
    def frame_id(self):
        return f"{self.split}_{self.index:03d}"

    @property
    def manifest_split(self):
        return MANIFEST_SPLIT[self.split]


def frame_records(run: RunConfig, splits=SPLIT_KEYS):
    out = []
    for split, i, ph in run.phantom_list():
        if split not in splits:
            continue
        evaluated = not split.endswith("_train")
        out.append(
            FrameRecord(
                split=split,
                index=i,
                phantom=ph,
                domain=TARGET if split.startswith("target") else SOURCE,
                snr_db=run.pipeline.test_snr_db if evaluated else None,
                noise_seed=ph.rng_seed + 7_000_000,
                clutter_seed=ph.rng_seed + 9_000_000,
            )
        )
    return out


def simulate_record(run: RunConfig, rec: FrameRecord) -> ChannelFrame:
    """Channel data for one record: simulate, shift (target), then add noise (evaluation splits)."""
    frame = simulate_channel_data(make_phantom(rec.phantom), run.array)
    if rec.domain == TARGET:
        frame = apply_domain_shift(frame, run.shift, clutter_seed=rec.clutter_seed)
    if rec.snr_db is not None:
        frame = add_noise(frame, rec.snr_db, rec.noise_seed)
    meta = dict(frame.meta, frame_id=rec.frame_id, split=rec.split, phantom=rec.phantom.to_dict())
    return frame.replace(meta=meta)


def image_grid(run: RunConfig) -> PixelGrid:
    p, zf = run.pipeline, run.focus_depth
    return make_grid(run.array, (-p.image_half_width, p.image_half_width), (zf - p.image_half_depth, zf + p.image_half_depth))


def focus_frame(run: RunConfig, frame: ChannelFrame, grid: Optional[PixelGrid] = None) -> FocusedTensor:
    return focus(analytic_signal(frame), grid if grid is not None else image_grid(run))


def frame_roi(rec: FrameRecord) -> RoiPair:
    return default_roi(rec.phantom)


def _band(run: RunConfig):
    zf, h = run.focus_depth, run.pipeline.band_half_depth
    return (zf - h, zf + h)


def source_samples(run: RunConfig, tensor: FocusedTensor, rec: FrameRecord) -> LabeledDataset:
    K = run.pipeline.kernel_depths
    labels = label_pixels(tensor.grid, rec.phantom, K, depth_band=_band(run))
    return extract_samples(
        tensor, labels, K, per_class=run.pipeline.per_class, seed=rec.phantom.rng_seed,
        normalization=run.pipeline.normalization, frame_index=rec.index,
    )


def target_samples(run: RunConfig, tensor: FocusedTensor, rec: FrameRecord) -> LabeledDataset:
    K = run.pipeline.kernel_depths
    labels = region_labels(tensor.grid, K, run.cyst_center, run.pipeline.target_region_radius)
    return extract_samples(
        tensor, labels, K, num_unlabeled=run.pipeline.target_per_frame, seed=rec.phantom.rng_seed,
        normalization=run.pipeline.normalization, frame_index=rec.index,
    )


def build_datasets(run: RunConfig, tensors: dict, records) -> tuple:
    """Balanced source pairs and unlabeled target samples from the train splits.

    ``tensors`` maps frame id to :class:`FocusedTensor`.
    """
    src, tgt = [], []
    for rec in records:
        if rec.split == "source_train":
            src.append(source_samples(run, tensors[rec.frame_id], rec))
        elif rec.split == "target_train":
            tgt.append(target_samples(run, tensors[rec.frame_id], rec))
    if not src:
        raise DataError("no source training frames")
    source = LabeledDataset.concatenate(src)
    target = LabeledDataset.concatenate(tgt) if tgt else None
    if target is not None and len(target) != len(source):
        log.warning("target sample count %d differs from source count %d", len(target), len(source))
    return source, target


def training_config(run: RunConfig, mode: str, seed: Optional[int] = None) -> TrainConfig:
    tc = run.training
    if seed is not None:
        tc = TrainConfig.from_dict(dict(tc.to_dict(), seed=seed))
    if mode == "da":
        return tc
    if mode == "baseline":
        return TrainConfig.from_dict(dict(tc.to_dict(), weights=LossWeights.baseline(r1_gamma=tc.weights.r1_gamma).to_dict()))
    raise ConfigurationError(f"unknown training mode {mode!r}; choose da or baseline")


def method_slot(method: str, domain: str) -> str:
    """Regressor slot used by a neural method on a frame of ``domain``."""
    if method == "dnn":
        return SOURCE
    if method == "dadnn":
        return domain
    raise ConfigurationError(f"{method!r} is not a neural method")


def beamform(run: RunConfig, tensor: FocusedTensor, method: str, regressor: Optional[Regressor] = None) -> np.ndarray:
    """Complex beamformed image ``(D, L)`` for one focused frame."""
    if method == "das":
        return das(tensor)
    if method == "gcf":
        return gcf(tensor, run.pipeline.gcf_m0)
    if method in ("dnn", "dadnn"):
        if regressor is None:
            raise ConfigurationError(f"method {method} needs a trained checkpoint")
        slot = method_slot(method, tensor.domain_tag)
        out = apply_network(tensor, regressor_fn(regressor, slot), run.pipeline.kernel_depths, run.pipeline.normalization)
        return das(out)
    raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")


def validation_frames(tensors: dict, records):
    return [
        ValidationFrame(tensors[r.frame_id], frame_roi(r), r.frame_id) for r in records if r.split == "target_validation"
    ]


# -- in-memory experiment ---------------------------------------------------------
@dataclass
class Experiment:
    run: RunConfig
    records: list
    tensors: dict
    source: LabeledDataset
    target: Optional[LabeledDataset]


def prepare(run: RunConfig) -> Experiment:
    """Simulate, focus and extract every frame of ``run`` in memory."""
    records = frame_records(run)
    grid = image_grid(run)
    tensors = {}
    for rec in records:
        tensors[rec.frame_id] = focus_frame(run, simulate_record(run, rec), grid)
    source, target = build_datasets(run, tensors, records)
    return Experiment(run, records, tensors, source, target)


def evaluate_models(exp: Experiment, regressors: dict, domains=(SOURCE, TARGET)) -> dict:
    """Mean CNR/CR per ``domain -> method`` over the test splits.

    ``regressors`` maps ``"dnn"``/``"dadnn"`` to trained regressors; methods
    without one are skipped.
    """
    out = {}
    for domain in domains:
        recs = [r for r in exp.records if r.split == f"{domain}_test"]
        per = {}
        for rec in recs:
            tensor = exp.tensors[rec.frame_id]
            roi = frame_roi(rec)
            for method in METHODS:
                if method in ("dnn", "dadnn") and method not in regressors:
                    continue
                env = np.abs(beamform(exp.run, tensor, method, regressors.get(method)))
                per.setdefault(method, {"cnr": [], "cr": []})
                per[method]["cnr"].append(cnr(env, tensor.grid, roi))
                per[method]["cr"].append(cr(env, tensor.grid, roi))
        out[domain] = {
            m: {k: {"mean": summarize(v)[0], "std": summarize(v)[1], "n": len(v)} for k, v in vals.items()}
            for m, vals in per.items()
        }
    return out


def ordering_checks(metrics: dict, source_tolerance: float = 1.0) -> dict:
    """Boolean outcome of each desk-scale ordering condition."""
    s, t = metrics[SOURCE], metrics[TARGET]
    return {
        "source_cnr_gap": abs(s["dadnn"]["cnr"]["mean"] - s["dnn"]["cnr"]["mean"]) <= source_tolerance,
        "target_cnr_vs_dnn": t["dadnn"]["cnr"]["mean"] > t["dnn"]["cnr"]["mean"],
        "target_cnr_vs_das": t["dadnn"]["cnr"]["mean"] > t["das"]["cnr"]["mean"],
        "target_cr_vs_das": t["dadnn"]["cr"]["mean"] > t["das"]["cr"]["mean"],
    }


def run_seed(exp: Experiment, seed: int) -> dict:
    """Train the baseline and the domain-adaptive model at ``seed`` and evaluate both."""
    val = validation_frames(exp.tensors, exp.records)
    base: TrainResult = train(training_config(exp.run, "baseline", seed), exp.source, None, val)
    da: TrainResult = train(training_config(exp.run, "da", seed), exp.source, exp.target, val)
    metrics = evaluate_models(exp, {"dnn": base.regressor, "dadnn": da.regressor})
    return {"seed": seed, "metrics": metrics, "checks": ordering_checks(metrics),
            "best_step": {"dnn": base.best_step, "dadnn": da.best_step}}
