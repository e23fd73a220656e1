"""Run configuration: everything needed to reproduce a pipeline run.

Two bundled profiles exist: :func:`default_config` is the full-size
65-element geometry with the full dataset sizes, :func:`small_config` is a
16-element, 4-depth-kernel variant that runs end to end on a laptop CPU.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .acoustics import ArrayConfig, PhantomSpec, ShiftSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .training import TrainConfig

DATA_ROOT_ENV = "DABEAM_DATA_ROOT"

SPLIT_KEYS = ("source_train", "source_test", "target_train", "target_validation", "target_test")
_SPLIT_OFFSETS = {k: 1000 * i for i, k in enumerate(SPLIT_KEYS)}


@dataclass
class PhantomTemplate:
    """Geometry shared by every cyst realization; speckle differs per seed."""

    cyst_diameter: float = 5e-3
    cyst_offset: tuple = (0.0, 0.0)  # relative to the transmit focus
    scatterer_density: float = 20.0
    field_half_width: float = 9.5e-3
    field_half_depth: float = 7.5e-3


@dataclass
class Splits:
    source_train: int = 12
    source_test: int = 21
    target_train: int = 6
    target_validation: int = 3
    target_test: int = 9


@dataclass
class PipelineOptions:
    kernel_depths: int = 10
    image_half_width: float = 8.5e-3
    image_half_depth: float = 6.5e-3
    band_half_depth: float = 5e-3
    per_class: int = 1391
    target_per_frame: int = 5564
    target_region_radius: float = 5e-3
    test_snr_db: float = 50.0
    normalization: str = "rms"
    gcf_m0: int = 1
    dynamic_range: float = 60.0


@dataclass
class RunConfig:
    array: ArrayConfig = field(default_factory=ArrayConfig)
    phantom: PhantomTemplate = field(default_factory=PhantomTemplate)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    splits: Splits = field(default_factory=Splits)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    training: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    data_root: str = "data"
    output_root: str = "runs"
    profile: str = "default"

    def __post_init__(self):
        (xlo, xhi), (zlo, zhi) = self.field_extent
        if self.pipeline.image_half_width > self.phantom.field_half_width:
            raise ConfigurationError("image must lie within the scatterer field laterally")
        if self.pipeline.image_half_depth > self.phantom.field_half_depth:
            raise ConfigurationError("image must lie within the scatterer field axially")
        if self.pipeline.band_half_depth > self.pipeline.image_half_depth:
            raise ConfigurationError("training band must lie within the image")
        if zlo <= 0:
            raise ConfigurationError("scatterer field must start in front of the array")

    # -- derived geometry ----------------------------------------------------
    @property
    def focus_depth(self):
        return self.array.transmit_focus_depth

    @property
    def field_extent(self):
        p, zf = self.phantom, self.focus_depth
        return ((-p.field_half_width, p.field_half_width), (zf - p.field_half_depth, zf + p.field_half_depth))

    @property
    def cyst_center(self):
        dx, dz = self.phantom.cyst_offset
        return (dx, self.focus_depth + dz)

    def phantom_seed(self, split: str, index: int) -> int:
        return 100_000 * self.seed + _SPLIT_OFFSETS[split] + index

    def phantom_spec(self, split: str, index: int) -> PhantomSpec:
        return PhantomSpec(
            cyst_center=self.cyst_center,
            cyst_diameter=self.phantom.cyst_diameter,
            scatterer_density=self.phantom.scatterer_density,
            field_extent=self.field_extent,
            rng_seed=self.phantom_seed(split, index),
        )

    def phantom_list(self):
        """``(split, index, PhantomSpec)`` for every frame of the run."""
        return [
            (split, i, self.phantom_spec(split, i)) for split in SPLIT_KEYS for i in range(getattr(self.splits, split))
        ]

    @property
    def data_path(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV, self.data_root))

    @property
    def output_path(self) -> Path:
        return Path(self.output_root)

    # -- serialization -------------------------------------------------------
    def to_dict(self):
        """Plain JSON types only (tuples become lists)."""
        return json.loads(json.dumps(self._raw_dict()))

    def _raw_dict(self):
        return {
            "profile": self.profile,
            "seed": self.seed,
            "data_root": self.data_root,
            "output_root": self.output_root,
            "array": self.array.to_dict(),
            "phantom": dataclasses.asdict(self.phantom),
            "shift": self.shift.to_dict(),
            "splits": dataclasses.asdict(self.splits),
            "pipeline": dataclasses.asdict(self.pipeline),
            "training": self.training.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "array" in d:
                d["array"] = ArrayConfig.from_dict(d["array"])
            if "phantom" in d:
                ph = dict(d["phantom"])
                if "cyst_offset" in ph:
                    ph["cyst_offset"] = tuple(ph["cyst_offset"])
                d["phantom"] = PhantomTemplate(**ph)
            if "shift" in d:
                d["shift"] = ShiftSpec.from_dict(d["shift"])
            if "splits" in d:
                d["splits"] = Splits(**d["splits"])
            if "pipeline" in d:
                d["pipeline"] = PipelineOptions(**d["pipeline"])
            if "training" in d:
                d["training"] = TrainConfig.from_dict(d["training"])
        except TypeError as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def default_config(**overrides) -> RunConfig:
    return RunConfig(**overrides)


def small_config(**overrides) -> RunConfig:
    """16 elements, 4-depth kernels, focus at 20 mm; CPU-friendly networks."""
    zf = 20e-3
    cfg = RunConfig(
        array=ArrayConfig(num_elements=16, transmit_focus_depth=zf),
        phantom=PhantomTemplate(cyst_diameter=5e-3, field_half_width=6e-3, field_half_depth=6e-3),
        shift=ShiftSpec(rng_seed=7),
        splits=Splits(source_train=6, source_test=5, target_train=6, target_validation=2, target_test=5),
        pipeline=PipelineOptions(
            kernel_depths=4,
            image_half_width=5e-3,
            image_half_depth=5e-3,
            band_half_depth=5e-3,
            per_class=1391,
            target_per_frame=2782,
            target_region_radius=4e-3,
        ),
        training=TrainConfig(
            weights=LossWeights(),
            norm="l2",
            generator_hidden=(256, 256),
            discriminator_hidden=(256, 128),
            regressor_hidden=(256, 256, 256),
            epochs=20,
            eval_interval=260,
            log_interval=260,
        ),
        data_root="data-small",
        output_root="runs-small",
        profile="small",
    )
    return cfg.replace(**overrides) if overrides else cfg


PROFILES = {"default": default_config, "small": small_config}
