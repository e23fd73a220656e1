"""Contrast metrics on uncompressed envelopes and per-method summary tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .acoustics import PhantomSpec
from .aperture import PixelGrid
from .errors import DataError, MetricError


@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float

    def mask(self, grid: PixelGrid) -> np.ndarray:
        X, Z = grid.mesh()
        return (X - self.center[0]) ** 2 + (Z - self.center[1]) ** 2 <= self.radius**2

    def to_dict(self):
        return {"type": "disk", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Annulus:
    center: tuple
    inner_radius: float
    outer_radius: float

    def mask(self, grid: PixelGrid) -> np.ndarray:
        X, Z = grid.mesh()
        r2 = (X - self.center[0]) ** 2 + (Z - self.center[1]) ** 2
        return (r2 > self.inner_radius**2) & (r2 <= self.outer_radius**2)

    def to_dict(self):
        return {
            "type": "annulus",
            "center": list(self.center),
            "inner_radius": self.inner_radius,
            "outer_radius": self.outer_radius,
        }


def region_from_dict(d):
    kind = d.get("type")
    if kind == "disk":
        return Disk(tuple(d["center"]), float(d["radius"]))
    if kind == "annulus":
        return Annulus(tuple(d["center"]), float(d["inner_radius"]), float(d["outer_radius"]))
    raise DataError(f"unknown ROI region type {kind!r}")


@dataclass(frozen=True)
class RoiPair:
    lesion: Disk
    background: object  # Disk or Annulus

    def masks(self, grid: PixelGrid, min_pixels: int = 1):
        les = self.lesion.mask(grid)
        bg = self.background.mask(grid)
        if np.any(les & bg):
            raise DataError("lesion and background ROIs overlap")
        if les.sum() < min_pixels or bg.sum() < min_pixels:
            raise DataError(
                f"ROI too small for this grid: lesion {int(les.sum())}, background {int(bg.sum())} pixels"
            )
        return les, bg

    def to_dict(self):
        return {"lesion": self.lesion.to_dict(), "background": self.background.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(region_from_dict(d["lesion"]), region_from_dict(d["background"]))


def default_roi(phantom: PhantomSpec, lesion_fraction: float = 0.7, clearance: float = 1e-3) -> RoiPair:
    """Lesion disk at 0.7 cyst radius plus an equal-area concentric background annulus.

    The annulus starts ``clearance`` outside the cyst wall, so it is centred
    on, and therefore at the same mean depth as, the lesion.
    """
    r_les = lesion_fraction * phantom.cyst_radius
    inner = phantom.cyst_radius + clearance
    outer = math.sqrt(inner**2 + r_les**2)
    center = tuple(phantom.cyst_center)
    return RoiPair(Disk(center, r_les), Annulus(center, inner, outer))


def _check_envelope(env):
    if np.iscomplexobj(env):
        raise DataError("metrics need the envelope (magnitude), not complex data")
    env = np.asarray(env, dtype=np.float64)
    if np.any(env < 0):
        raise DataError("envelope must be nonnegative (uncompressed); got negative values, log data?")
    return env


def roi_stats(envelope, grid: PixelGrid, roi: RoiPair):
    env = _check_envelope(envelope)
    les, bg = roi.masks(grid)
    vl, vb = env[les], env[bg]
    return float(vl.mean()), float(vl.std()), float(vb.mean()), float(vb.std())


def cnr_from_stats(mu_b, sigma_b, mu_l, sigma_l) -> float:
    denom = math.sqrt(sigma_b**2 + sigma_l**2)
    if denom == 0:
        raise MetricError("CNR undefined: both ROIs have zero variance")
    diff = abs(mu_b - mu_l)
    if diff == 0:
        return float("-inf")
    return 20 * math.log10(diff / denom)


def cr_from_stats(mu_b, mu_l) -> float:
    if not mu_b > 0:
        raise MetricError("CR undefined: background mean must be positive")
    if mu_l == 0:
        return float("inf")
    return -20 * math.log10(mu_l / mu_b)


def cnr(envelope, grid: PixelGrid, roi: RoiPair) -> float:
    """Contrast-to-noise ratio in dB; ``-inf`` when the ROI means coincide."""
    mu_l, s_l, mu_b, s_b = roi_stats(envelope, grid, roi)
    return cnr_from_stats(mu_b, s_b, mu_l, s_l)


def cr(envelope, grid: PixelGrid, roi: RoiPair) -> float:
    """Contrast ratio in dB; ``+inf`` for a perfectly empty lesion."""
    mu_l, _, mu_b, _ = roi_stats(envelope, grid, roi)
    return cr_from_stats(mu_b, mu_l)


@dataclass(frozen=True)
class StatRow:
    method: str
    metric: str
    mean: float
    std: float
    n: int


def summarize(values):
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def evaluate_method(
    envelopes: Mapping[str, Mapping[str, np.ndarray]],
    grids: Mapping[str, PixelGrid],
    rois: Mapping[str, RoiPair],
):
    """Per-method mean +- population std of CNR and CR over frames.

    ``envelopes[method][frame_id]`` is an uncompressed envelope on
    ``grids[frame_id]``. Returns ``(rows, per_frame)`` where ``per_frame``
    maps ``(method, frame_id)`` to ``{"cnr": .., "cr": ..}``.
    """
    rows, per_frame = [], {}
    for method, frames in envelopes.items():
        if not frames:
            raise DataError(f"method {method!r} has no frames")
        cnrs, crs = [], []
        for frame_id, env in frames.items():
            if frame_id not in rois:
                raise DataError(f"no ROI for frame {frame_id!r} in the manifest")
            grid = grids[frame_id]
            c1, c2 = cnr(env, grid, rois[frame_id]), cr(env, grid, rois[frame_id])
            per_frame[(method, frame_id)] = {"cnr": c1, "cr": c2}
            cnrs.append(c1)
            crs.append(c2)
        for metric, vals in (("cnr", cnrs), ("cr", crs)):
            m, s = summarize(vals)
            rows.append(StatRow(method, metric, m, s, len(vals)))
    return rows, per_frame


def format_table(rows) -> str:
    """Delimited text with a ``method,metric,mean,std,n`` header row."""
    buf = io.StringIO()
    buf.write("# std is the population standard deviation (ddof=0)\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", "mean", "std", "n"])
    for r in rows:
        writer.writerow([r.method, r.metric, f"{r.mean:.6f}", f"{r.std:.6f}", r.n])
    return buf.getvalue()


def parse_table(text: str):
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [StatRow(r["method"], r["metric"], float(r["mean"]), float(r["std"]), int(r["n"])) for r in reader]
