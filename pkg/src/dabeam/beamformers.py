"""Delay-and-sum, generalized coherence factor and the B-mode display chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aperture import FocusedTensor, PixelGrid
from .errors import DataError


def _values(tensor):
    return tensor.values if isinstance(tensor, FocusedTensor) else np.asarray(tensor)


def das(tensor) -> np.ndarray:
    """Mean of the focused aperture values across elements, per pixel."""
    return _values(tensor).mean(axis=-1)


def gcf_weights(tensor, m0: int = 1) -> np.ndarray:
    """Fraction of aperture-spectrum energy within ``|k| <= m0`` bins.

    The spectrum is an unwindowed DFT over exactly ``num_elements`` bins.
    Zero-energy apertures get weight 0.
    """
    values = _values(tensor)
    n_el = values.shape[-1]
    if m0 < 0 or 2 * m0 + 1 > n_el:
        raise DataError(f"M0={m0} needs 0 <= M0 and 2*M0+1 <= {n_el}")
    power = np.abs(np.fft.fft(values.astype(np.complex128), axis=-1)) ** 2
    k = np.arange(n_el)
    mask = np.minimum(k, n_el - k) <= m0
    low = np.sum(np.where(mask, power, 0.0), axis=-1)
    total = np.sum(power, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(total > 0, low / total, 0.0)
    return np.clip(w, 0.0, 1.0)


def gcf(tensor, m0: int = 1) -> np.ndarray:
    """DAS image weighted per depth sample by the generalized coherence factor."""
    return gcf_weights(tensor, m0) * das(tensor)


@dataclass
class BModeImage:
    intensity_db: np.ndarray  # (num_depths, num_lateral)
    grid: PixelGrid
    dynamic_range: float = 60.0

    def to_uint8(self) -> np.ndarray:
        """0 dB maps to 255 and -dynamic_range to 0."""
        scaled = (self.intensity_db + self.dynamic_range) / self.dynamic_range * 255.0
        return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def envelope(image) -> np.ndarray:
    return np.abs(np.asarray(image))


def envelope_logcompress(image, dynamic_range: float = 60.0, grid: PixelGrid = None) -> BModeImage:
    """``20 log10(|v| / max|v|)`` clipped to ``[-dynamic_range, 0]``."""
    env = envelope(image)
    peak = env.max() if env.size else 0.0
    if not peak > 0:
        raise DataError("cannot normalize an all-zero image")
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(env / peak)
    db = np.clip(db, -dynamic_range, 0.0)
    if grid is None:
        grid = PixelGrid(np.arange(env.shape[1], dtype=float), np.arange(env.shape[0], dtype=float))
    return BModeImage(db, grid, float(dynamic_range))
