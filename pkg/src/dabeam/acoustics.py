"""Point-scatterer channel-data simulation and the synthetic target-domain shift.

Source-domain frames are built by superposing echoes from a random scatterer
field with an anechoic cyst. The target domain is produced from source frames
by :func:`apply_domain_shift`, which aberrates, re-weights and clutters the
per-element signals in a seeded, reproducible way.

All lengths are in meters and all times in seconds. Lateral position is
``x`` (0 at the array center), depth is ``z``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import gausspulse

from .errors import ConfigurationError, DataError

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


@dataclass(frozen=True)
class ArrayConfig:
    """Linear-array geometry and sampling parameters.

    Elements sit at ``z = 0`` with lateral positions symmetric about 0.
    """

    num_elements: int = 65
    pitch: float = 298e-6
    center_frequency: float = 5.208e6
    sampling_frequency: float = 20.832e6
    sound_speed: float = 1540.0
    transmit_focus_depth: float = 70e-3

    def __post_init__(self):
        if int(self.num_elements) != self.num_elements or self.num_elements < 2:
            raise ConfigurationError(f"num_elements must be an integer >= 2, got {self.num_elements}")
        for name in ("pitch", "center_frequency", "sampling_frequency", "sound_speed", "transmit_focus_depth"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be strictly positive, got {value}")
        if self.sampling_frequency < 2 * self.center_frequency:
            raise ConfigurationError(
                "sampling_frequency must be at least twice center_frequency "
                f"({self.sampling_frequency} < 2 * {self.center_frequency})"
            )

    @property
    def element_positions(self) -> np.ndarray:
        n = np.arange(self.num_elements)
        return (n - (self.num_elements - 1) / 2) * self.pitch

    @property
    def wavelength(self) -> float:
        return self.sound_speed / self.center_frequency

    @property
    def transmit_offset(self) -> float:
        """Time at which the focused wavefront crosses the array center.

        Time zero is the firing of the outermost elements; the center element
        fires last so that all paths converge on the focal point.
        """
        x_max = float(np.max(np.abs(self.element_positions)))
        zf = self.transmit_focus_depth
        return (math.hypot(x_max, zf) - zf) / self.sound_speed

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PulseSpec:
    """Gaussian-windowed sinusoid; bandwidth is measured at ``reference_level_db``."""

    center_frequency: float = 5.208e6
    fractional_bandwidth: float = 0.6
    reference_level_db: float = -6.0
    cutoff_db: float = -60.0

    def waveform(self, t):
        return gausspulse(
            t, fc=self.center_frequency, bw=self.fractional_bandwidth, bwr=self.reference_level_db
        )

    @property
    def half_duration(self) -> float:
        return float(
            gausspulse(
                "cutoff",
                fc=self.center_frequency,
                bw=self.fractional_bandwidth,
                bwr=self.reference_level_db,
                tpr=self.cutoff_db,
            )
        )

    @classmethod
    def for_array(cls, config: ArrayConfig, **kwargs):
        return cls(center_frequency=config.center_frequency, **kwargs)


@dataclass(frozen=True)
class PhantomSpec:
    """Anechoic cyst embedded in a uniformly random scatterer field.

    ``scatterer_density`` is in scatterers per mm^2 and ``field_extent`` is
    ``((x_min, x_max), (z_min, z_max))`` in meters.
    """

    cyst_center: tuple = (0.0, 70e-3)
    cyst_diameter: float = 5e-3
    scatterer_density: float = 20.0
    field_extent: tuple = ((-9.5e-3, 9.5e-3), (62.5e-3, 77.5e-3))
    rng_seed: int = 0

    def __post_init__(self):
        (x0, x1), (z0, z1) = self.field_extent
        if not (x1 > x0 and z1 > z0):
            raise ConfigurationError(f"degenerate field_extent {self.field_extent}")
        if z0 <= 0:
            raise ConfigurationError("field must lie in front of the array (z_min > 0)")
        if self.cyst_diameter < 0 or self.scatterer_density < 0:
            raise ConfigurationError("cyst_diameter and scatterer_density must be nonnegative")
        cx, cz = self.cyst_center
        r = self.cyst_diameter / 2
        if cx - r < x0 or cx + r > x1 or cz - r < z0 or cz + r > z1:
            raise ConfigurationError(
                f"cyst (center {self.cyst_center}, diameter {self.cyst_diameter}) "
                f"does not fit inside field_extent {self.field_extent}"
            )

    @property
    def cyst_radius(self) -> float:
        return self.cyst_diameter / 2

    def inside_cyst(self, x, z):
        cx, cz = self.cyst_center
        return (np.asarray(x) - cx) ** 2 + (np.asarray(z) - cz) ** 2 <= self.cyst_radius**2

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["cyst_center"] = list(self.cyst_center)
        d["field_extent"] = [list(e) for e in self.field_extent]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cyst_center"] = tuple(d["cyst_center"])
        d["field_extent"] = tuple(tuple(e) for e in d["field_extent"])
        return cls(**d)


@dataclass
class ScattererField:
    positions: np.ndarray  # (K, 2) columns: lateral, depth
    amplitudes: np.ndarray  # (K,)
    extent: Optional[tuple] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1)
        if len(self.positions) != len(self.amplitudes):
            raise ConfigurationError("positions and amplitudes differ in length")

    def __len__(self):
        return len(self.amplitudes)

    def with_amplitudes(self, amplitudes):
        return ScattererField(self.positions.copy(), amplitudes, self.extent)


@dataclass
class ChannelFrame:
    """Per-element received signals of one acquisition, ``samples[t, n]``."""

    samples: np.ndarray
    t0: float
    config: ArrayConfig
    domain_tag: str = SOURCE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.config.num_elements:
            raise DataError(
                f"samples must have shape (num_time_samples, {self.config.num_elements}), "
                f"got {self.samples.shape}"
            )
        if self.domain_tag not in DOMAINS:
            raise DataError(f"unknown domain_tag {self.domain_tag!r}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("channel frame contains non-finite samples")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def time_axis(self) -> np.ndarray:
        return self.t0 + np.arange(self.num_samples) / self.config.sampling_frequency

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ShiftSpec:
    """Parameters of the synthetic source-to-target domain shift.

    ``phase_screen_rms`` is the rms per-element time shift (seconds) and
    ``phase_screen_correlation`` its Gaussian correlation length in elements.
    ``clutter_to_signal_db=None`` (or -inf) disables clutter.
    """

    phase_screen_rms: float = 30e-9
    phase_screen_correlation: float = 8.0
    clutter_to_signal_db: Optional[float] = -6.0
    gain_ripple_db: float = 3.0
    clutter_correlation: float = 2.0
    rng_seed: int = 0

    @property
    def has_clutter(self) -> bool:
        return self.clutter_to_signal_db is not None and np.isfinite(self.clutter_to_signal_db)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_phantom(spec: PhantomSpec) -> ScattererField:
    """Draw a scatterer field with uniform positions and standard-normal amplitudes.

    Scatterers falling inside the cyst disk (boundary included) get amplitude 0.
    """
    (x0, x1), (z0, z1) = spec.field_extent
    area_mm2 = (x1 - x0) * (z1 - z0) * 1e6
    count = int(round(spec.scatterer_density * area_mm2))
    rng = np.random.default_rng(spec.rng_seed)
    x = rng.uniform(x0, x1, count)
    z = rng.uniform(z0, z1, count)
    amplitudes = rng.standard_normal(count)
    amplitudes[spec.inside_cyst(x, z)] = 0.0
    return ScattererField(np.column_stack([x, z]), amplitudes, extent=spec.field_extent)


def _time_window(field: ScattererField, config: ArrayConfig, pulse: PulseSpec):
    if field.extent is not None:
        (x0, x1), (z0, z1) = field.extent
    elif len(field):
        x0, z0 = field.positions.min(axis=0)
        x1, z1 = field.positions.max(axis=0)
    else:
        raise ConfigurationError("cannot infer a time window for an empty field without an extent")
    c = config.sound_speed
    xe = config.element_positions
    t0 = 2 * z0 / c
    far_lateral = max(abs(x0 - xe.min()), abs(x1 - xe.max()), abs(x0 - xe.max()), abs(x1 - xe.min()))
    t_end = config.transmit_offset + (z1 + math.hypot(far_lateral, z1)) / c + pulse.half_duration
    needed = int(math.ceil((t_end - t0) * config.sampling_frequency)) + 1
    return t0, needed


def simulate_channel_data(
    field: ScattererField,
    config: ArrayConfig,
    pulse: Optional[PulseSpec] = None,
    num_samples: Optional[int] = None,
    chunk_size: int = 2048,
) -> ChannelFrame:
    """Superpose point-scatterer echoes on every receive element.

    Element ``n`` receives ``sum_k a_k w_k p(t - tau_kn)`` with
    ``tau_kn = transmit_offset + (z_k + |r_k - e_n|) / c`` and spherical
    spreading ``w_k = z_focus / |r_k|``. The time axis starts at
    ``2 z_min / c`` of the field extent.

    Parameters
    ----------
    field : ScattererField
    config : ArrayConfig
    pulse : PulseSpec, optional
        Defaults to a 60% bandwidth Gaussian pulse at the array center frequency.
    num_samples : int, optional
        Override the record length; must be long enough for the whole extent.
    chunk_size : int
        Scatterers processed per vectorized block. Results do not depend on it
        beyond floating-point summation order.
    """
    pulse = pulse or PulseSpec.for_array(config)
    t0, needed = _time_window(field, config, pulse)
    if num_samples is None:
        num_samples = needed
    elif num_samples < needed:
        raise ConfigurationError(
            f"time window of {num_samples} samples cannot hold echoes from the field extent "
            f"({needed} samples required)"
        )

    n_el = config.num_elements
    fs = config.sampling_frequency
    c = config.sound_speed
    xe = config.element_positions
    half = int(math.ceil(pulse.half_duration * fs)) + 1
    offsets = np.arange(-half, half + 1)
    acc = np.zeros(num_samples * n_el)
    el_index = np.arange(n_el)

    live = np.flatnonzero(field.amplitudes != 0)
    for start in range(0, len(live), chunk_size):
        sel = live[start : start + chunk_size]
        xk, zk = field.positions[sel, 0], field.positions[sel, 1]
        weight = field.amplitudes[sel] * config.transmit_focus_depth / np.hypot(xk, zk)
        d_rx = np.hypot(xk[:, None] - xe[None, :], zk[:, None])
        tau = config.transmit_offset + (zk[:, None] + d_rx) / c  # (K, N)
        centre = np.floor((tau - t0) * fs).astype(np.int64)
        idx = centre[..., None] + offsets  # (K, N, L)
        dt = t0 + idx / fs - tau[..., None]
        values = weight[:, None, None] * pulse.waveform(dt)
        ok = (idx >= 0) & (idx < num_samples)
        flat = idx * n_el + el_index[None, :, None]
        acc += np.bincount(flat[ok], weights=values[ok], minlength=num_samples * n_el)

    meta = {}
    if field.extent is not None:
        meta["field_extent"] = [list(e) for e in field.extent]
    return ChannelFrame(acc.reshape(num_samples, n_el), t0, config, SOURCE, meta)


def add_noise(frame: ChannelFrame, snr_db: float, seed: int) -> ChannelFrame:
    """Add white Gaussian noise at ``10 log10(P_signal / P_noise) = snr_db``.

    ``snr_db = inf`` returns an unchanged copy.
    """
    if np.isposinf(snr_db):
        return frame.replace(samples=frame.samples.copy(), meta=dict(frame.meta))
    power = float(np.mean(np.abs(frame.samples) ** 2))
    if power == 0.0:
        raise DataError("SNR is undefined for an all-zero frame")
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    rng = np.random.default_rng(seed)
    noisy = frame.samples + sigma * rng.standard_normal(frame.samples.shape)
    meta = dict(frame.meta, snr_db=float(snr_db), noise_seed=int(seed))
    return frame.replace(samples=noisy, meta=meta)


def _smooth(x, sigma, axis=-1):
    """Gaussian low-pass; a no-op for kernels narrower than one sample."""
    if int(4.0 * sigma + 0.5) < 1:
        return x
    return gaussian_filter1d(x, sigma, axis=axis, mode="reflect")


def phase_screen(shift: ShiftSpec, num_elements: int) -> np.ndarray:
    """Zero-mean per-element delays (seconds) with exactly the requested rms."""
    rng = np.random.default_rng(shift.rng_seed)
    white = rng.standard_normal(num_elements)
    if shift.phase_screen_rms == 0:
        return np.zeros(num_elements)
    screen = _smooth(white, shift.phase_screen_correlation)
    screen = screen - screen.mean()
    rms = math.sqrt(float(np.mean(screen**2)))
    if rms == 0:
        return np.zeros(num_elements)
    return screen * (shift.phase_screen_rms / rms)


def gain_ripple(shift: ShiftSpec, num_elements: int) -> np.ndarray:
    rng = np.random.default_rng([shift.rng_seed, 1])
    ripple_db = rng.uniform(-1.0, 1.0, num_elements) * shift.gain_ripple_db
    return 10 ** (ripple_db / 20)


def _delay_columns(samples: np.ndarray, delays: np.ndarray, fs: float) -> np.ndarray:
    """Band-limited fractional delay of each column via the FFT shift theorem."""
    num = samples.shape[0]
    pad = int(math.ceil(np.max(np.abs(delays)) * fs)) + 16
    nfft = 1 << int(math.ceil(math.log2(num + 2 * pad)))
    spectrum = np.fft.rfft(samples, n=nfft, axis=0)
    freqs = np.fft.rfftfreq(nfft, d=1 / fs)
    spectrum *= np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])
    return np.fft.irfft(spectrum, n=nfft, axis=0)[:num]


def make_clutter(shape, config: ArrayConfig, shift: ShiftSpec, seed) -> np.ndarray:
    """Unit-power clutter, band-limited to the pulse and low-pass across elements."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(shape)
    pulse = PulseSpec.for_array(config)
    fs = config.sampling_frequency
    half = int(math.ceil(pulse.half_duration * fs))
    kernel = pulse.waveform(np.arange(-half, half + 1) / fs)
    clutter = np.apply_along_axis(np.convolve, 0, noise, kernel, mode="same")
    clutter = _smooth(clutter, shift.clutter_correlation, axis=1)
    return clutter / math.sqrt(float(np.mean(clutter**2)))


def apply_domain_shift(frame: ChannelFrame, shift: ShiftSpec, clutter_seed=None) -> ChannelFrame:
    """Map a source frame into the synthetic target domain.

    The frame is aberrated by a correlated per-element phase screen, each
    element gain is perturbed uniformly in dB within ``+-gain_ripple_db``, and
    band-limited clutter with element-correlated structure is added at
    ``clutter_to_signal_db`` relative to the shifted signal power.

    The phase screen and gains depend only on ``shift.rng_seed``, so every
    frame shifted with the same spec sees the same aberration. Clutter is drawn
    from ``clutter_seed`` (default: derived from ``shift.rng_seed``).
    """
    if frame.domain_tag != SOURCE:
        raise DataError(f"domain shift expects a source frame, got {frame.domain_tag!r}")
    n_el = frame.config.num_elements
    samples = frame.samples.astype(np.float64, copy=True)

    delays = phase_screen(shift, n_el)
    if np.any(delays != 0):
        samples = _delay_columns(samples, delays, frame.config.sampling_frequency)
    if shift.gain_ripple_db != 0:
        samples = samples * gain_ripple(shift, n_el)[None, :]
    if shift.has_clutter:
        if clutter_seed is None:
            clutter_seed = [shift.rng_seed, 2]
        power = float(np.mean(samples**2))
        clutter = make_clutter(samples.shape, frame.config, shift, clutter_seed)
        samples = samples + math.sqrt(power * 10 ** (shift.clutter_to_signal_db / 10)) * clutter

    meta = dict(frame.meta, shift=shift.to_dict())
    if clutter_seed is not None:
        meta["clutter_seed"] = np.atleast_1d(clutter_seed).tolist()
    return frame.replace(samples=samples, domain_tag=TARGET, meta=meta)
