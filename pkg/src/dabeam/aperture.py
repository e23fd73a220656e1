"""Aperture-domain data: focusing, accept/reject labels, sample stacking and
overlap-averaged reconstruction.

A network sample covers ``kernel_depths`` consecutive depth samples of one
image column. Window ``i`` starts at depth index ``i``, so a tensor with ``D``
depths has ``D - kernel_depths + 1`` windows per column; depth 0 is covered by
a single window while interior depths are covered ``kernel_depths`` times.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import hilbert

from .acoustics import SOURCE, TARGET, ArrayConfig, ChannelFrame, PhantomSpec
from .errors import CountError, CoverageError, DataError, OutOfBoundsError

REJECT = 0
ACCEPT = 1
UNLABELED = 2
EXCLUDED = -1
LABEL_NAMES = {REJECT: "reject", ACCEPT: "accept", UNLABELED: "unlabeled"}

NORMALIZE_RMS = "rms"
NORMALIZE_NONE = "none"


def analytic_signal(frame: ChannelFrame) -> ChannelFrame:
    """Per-element analytic signal; the real part is the input, bit for bit."""
    if frame.num_samples < 16:
        raise DataError("analytic_signal needs at least 16 time samples")
    real = np.asarray(frame.samples, dtype=np.float64)
    imag = np.imag(hilbert(real, axis=0))
    return frame.replace(samples=real + 1j * imag)


@dataclass(frozen=True)
class PixelGrid:
    x: np.ndarray  # lateral positions, strictly increasing
    z: np.ndarray  # depths, strictly increasing

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.float64)
        if x.ndim != 1 or z.ndim != 1 or len(x) == 0 or len(z) == 0:
            raise DataError("grid axes must be nonempty 1-D arrays")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(z) <= 0):
            raise DataError("grid axes must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def shape(self):
        return (len(self.z), len(self.x))

    def mesh(self):
        """``(X, Z)`` arrays of shape ``(num_depths, num_lateral)``."""
        return np.meshgrid(self.x, self.z)

    def to_dict(self):
        return {"x": self.x.tolist(), "z": self.z.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x"]), np.asarray(d["z"]))


def make_grid(config: ArrayConfig, lateral_range, depth_range) -> PixelGrid:
    """Grid with lateral spacing = pitch and axial spacing = c / (2 fs).

    Lateral positions are aligned with the element positions (0 on axis).
    """
    dx = config.pitch
    dz = config.sound_speed / (2 * config.sampling_frequency)
    x_lo, x_hi = lateral_range
    offset = (config.num_elements - 1) / 2 % 1 * dx  # keeps x aligned with element centers
    i0 = int(np.ceil((x_lo - offset) / dx - 1e-9))
    i1 = int(np.floor((x_hi - offset) / dx + 1e-9))
    x = offset + dx * np.arange(i0, i1 + 1)
    z0, z1 = depth_range
    nz = int(np.floor((z1 - z0) / dz + 1e-9)) + 1
    z = z0 + dz * np.arange(nz)
    return PixelGrid(x, z)


@dataclass
class FocusedTensor:
    """Delayed analytic aperture signals ``values[depth, lateral, element]``."""

    values: np.ndarray
    grid: PixelGrid
    config: ArrayConfig
    domain_tag: str = SOURCE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.grid.shape + (self.config.num_elements,)
        if self.values.shape != expected:
            raise DataError(f"values shape {self.values.shape} does not match grid/config {expected}")

    @property
    def shape(self):
        return self.values.shape

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def focusing_delays(grid: PixelGrid, config: ArrayConfig) -> np.ndarray:
    """Two-way delay ``tau[depth, lateral, element]`` in seconds."""
    X, Z = grid.mesh()
    xe = config.element_positions
    d_rx = np.sqrt((X[..., None] - xe) ** 2 + Z[..., None] ** 2)
    return config.transmit_offset + (Z[..., None] + d_rx) / config.sound_speed


def focus(frame: ChannelFrame, grid: PixelGrid, dtype=np.complex64) -> FocusedTensor:
    """Sample each element's analytic signal at the pixel's two-way delay.

    Linear interpolation between neighbouring time samples. A pixel whose
    delay on any element falls outside the record raises
    :class:`OutOfBoundsError` listing the offending ``(depth, lateral)`` indices.
    """
    data = frame.samples
    if not np.iscomplexobj(data):
        raise DataError("focus expects an analytic (complex) frame; call analytic_signal first")
    config = frame.config
    pos = (focusing_delays(grid, config) - frame.t0) * config.sampling_frequency
    bad = (pos < 0) | (pos > frame.num_samples - 1)
    if np.any(bad):
        pixels = sorted({tuple(map(int, p)) for p in np.argwhere(bad.any(axis=-1))})
        raise OutOfBoundsError(
            f"{len(pixels)} pixels fall outside the frame's time support, e.g. {pixels[:5]}",
            pixels,
        )
    i0 = np.minimum(np.floor(pos).astype(np.int64), frame.num_samples - 2)
    frac = pos - i0
    cols = np.arange(config.num_elements)
    lo = data[i0, cols]
    hi = data[i0 + 1, cols]
    values = (1 - frac) * lo + frac * hi
    return FocusedTensor(values.astype(dtype), grid, config, frame.domain_tag, dict(frame.meta))


def label_pixels(grid: PixelGrid, phantom: PhantomSpec, kernel_depths: int, depth_band=None) -> np.ndarray:
    """Accept/reject map over sliding-window positions ``[window, lateral]``.

    A window is REJECT if every depth of its kernel lies inside the cyst, ACCEPT
    if every depth lies outside, and EXCLUDED otherwise or when its kernel
    leaves ``depth_band`` (``(z_lo, z_hi)``, optional).
    """
    num_windows = len(grid.z) - kernel_depths + 1
    if num_windows < 1:
        raise DataError("kernel does not fit in the grid depth range")
    X, Z = grid.mesh()
    inside = phantom.inside_cyst(X, Z)  # (D, L)
    win = sliding_window_view(inside, kernel_depths, axis=0)  # (W, L, K)
    labels = np.full((num_windows, len(grid.x)), EXCLUDED, dtype=np.int8)
    labels[win.all(axis=-1)] = REJECT
    labels[(~win).all(axis=-1)] = ACCEPT
    if depth_band is not None:
        z_lo, z_hi = depth_band
        starts = grid.z[:num_windows]
        ends = grid.z[kernel_depths - 1 :]
        labels[(starts < z_lo) | (ends > z_hi), :] = EXCLUDED
    return labels


def region_labels(grid: PixelGrid, kernel_depths: int, center, radius) -> np.ndarray:
    """UNLABELED for windows whose kernel lies within ``radius`` of ``center``."""
    num_windows = len(grid.z) - kernel_depths + 1
    X, Z = grid.mesh()
    near = (X - center[0]) ** 2 + (Z - center[1]) ** 2 <= radius**2
    win = sliding_window_view(near, kernel_depths, axis=0)
    labels = np.full((num_windows, len(grid.x)), EXCLUDED, dtype=np.int8)
    labels[win.all(axis=-1)] = UNLABELED
    return labels


def stack_block(block: np.ndarray) -> np.ndarray:
    """``(..., K, N)`` complex block to ``(..., 2*K*N)`` real vector.

    Real parts come first, then imaginary parts; each half runs through depth
    with all elements of one depth contiguous.
    """
    lead = block.shape[:-2]
    flat = block.reshape(lead + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def unstack_block(x: np.ndarray, kernel_depths: int, num_elements: int) -> np.ndarray:
    half = kernel_depths * num_elements
    if x.shape[-1] != 2 * half:
        raise DataError(f"vector length {x.shape[-1]} != 2*{kernel_depths}*{num_elements}")
    out = x[..., :half] + 1j * x[..., half:]
    return out.reshape(x.shape[:-1] + (kernel_depths, num_elements))


def sample_dim(kernel_depths: int, num_elements: int) -> int:
    return 2 * kernel_depths * num_elements


def window_blocks(values: np.ndarray, kernel_depths: int) -> np.ndarray:
    """Sliding windows ``(W, L, K, N)`` viewed from ``values[D, L, N]``."""
    if values.shape[0] < kernel_depths:
        raise DataError("kernel does not fit in the tensor depth range")
    return np.moveaxis(sliding_window_view(values, kernel_depths, axis=0), -1, -2)


def sliding_samples(tensor: FocusedTensor, kernel_depths: int) -> np.ndarray:
    """Every sliding-window sample of the tensor as ``(W, L, d)`` float32."""
    return stack_block(window_blocks(tensor.values, kernel_depths)).astype(np.float32)


def rms_scale(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-row rms, floored at ``eps`` so all-zero rows stay zero after division."""
    r = np.sqrt(np.mean(np.square(x, dtype=np.float64), axis=-1))
    return np.maximum(r, eps).astype(np.float32)


@dataclass(frozen=True)
class ApertureSample:
    x: np.ndarray
    pixel_index: tuple
    domain_tag: str
    label: str
    y: Optional[np.ndarray] = None
    scale: float = 1.0


@dataclass
class LabeledDataset:
    """Column-oriented storage of aperture samples.

    ``pixel_index`` rows are ``(frame, window, lateral)``; ``x`` and ``y`` hold
    normalized vectors, with the normalization factor in ``scale``.
    """

    x: np.ndarray
    label: np.ndarray
    pixel_index: np.ndarray
    domain_tag: str
    kernel_depths: int
    num_elements: int
    y: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    normalization: str = NORMALIZE_RMS
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        if self.scale is None:
            self.scale = np.ones(n, dtype=np.float32)
        if self.x.shape[1:] != (self.dim,):
            raise DataError(f"sample dim {self.x.shape[1:]} != {self.dim}")
        if self.y is not None and self.y.shape != self.x.shape:
            raise DataError("y must match x in shape")
        if not (len(self.label) == len(self.pixel_index) == len(self.scale) == n):
            raise DataError("dataset columns differ in length")

    @property
    def dim(self) -> int:
        return sample_dim(self.kernel_depths, self.num_elements)

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> ApertureSample:
        return ApertureSample(
            x=self.x[i],
            pixel_index=tuple(int(v) for v in self.pixel_index[i]),
            domain_tag=self.domain_tag,
            label=LABEL_NAMES[int(self.label[i])],
            y=None if self.y is None else self.y[i],
            scale=float(self.scale[i]),
        )

    @property
    def counts(self) -> dict:
        return {name: int(np.sum(self.label == code)) for code, name in LABEL_NAMES.items()}

    @property
    def is_balanced(self) -> bool:
        c = self.counts
        return c["accept"] == c["reject"]

    def subset(self, index):
        return dataclasses.replace(
            self,
            x=self.x[index],
            y=None if self.y is None else self.y[index],
            label=self.label[index],
            pixel_index=self.pixel_index[index],
            scale=self.scale[index],
        )

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            raise DataError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if (p.domain_tag, p.kernel_depths, p.num_elements, p.normalization) != (
                first.domain_tag,
                first.kernel_depths,
                first.num_elements,
                first.normalization,
            ):
                raise DataError("datasets are not compatible")
        has_y = [p.y is not None for p in parts]
        if any(has_y) and not all(has_y):
            raise DataError("cannot mix labeled and unlabeled datasets")
        return cls(
            x=np.concatenate([p.x for p in parts]),
            y=np.concatenate([p.y for p in parts]) if all(has_y) else None,
            label=np.concatenate([p.label for p in parts]),
            pixel_index=np.concatenate([p.pixel_index for p in parts]),
            scale=np.concatenate([p.scale for p in parts]),
            domain_tag=first.domain_tag,
            kernel_depths=first.kernel_depths,
            num_elements=first.num_elements,
            normalization=first.normalization,
            provenance={"parts": [p.provenance for p in parts]},
        )


def extract_samples(
    tensor: FocusedTensor,
    labels: np.ndarray,
    kernel_depths: int = 10,
    per_class: Optional[int] = None,
    num_unlabeled: Optional[int] = None,
    seed: int = 0,
    normalization: str = NORMALIZE_RMS,
    frame_index: int = 0,
) -> LabeledDataset:
    """Stack labeled (or unlabeled) windows into a dataset.

    With accept/reject labels, ``per_class`` windows of each class are drawn
    without replacement (default: as many as the rarer class allows), giving a
    balanced set. ACCEPT samples get ``y = x`` and REJECT samples ``y = 0``.
    With UNLABELED windows, ``num_unlabeled`` are drawn and ``y`` is absent.
    """
    num_windows = tensor.shape[0] - kernel_depths + 1
    if labels.shape != (num_windows, tensor.shape[1]):
        raise DataError(f"label map shape {labels.shape} != {(num_windows, tensor.shape[1])}")
    rng = np.random.default_rng(seed)
    unlabeled = np.flatnonzero(labels.ravel() == UNLABELED)
    if len(unlabeled):
        if np.any(np.isin(labels, (ACCEPT, REJECT))):
            raise DataError("label map mixes labeled and unlabeled windows")
        n = len(unlabeled) if num_unlabeled is None else num_unlabeled
        if n > len(unlabeled):
            raise CountError(f"requested {n} unlabeled samples but only {len(unlabeled)} are eligible")
        chosen = np.sort(rng.choice(unlabeled, size=n, replace=False))
        chosen_labels = np.full(n, UNLABELED, dtype=np.int8)
    else:
        acc = np.flatnonzero(labels.ravel() == ACCEPT)
        rej = np.flatnonzero(labels.ravel() == REJECT)
        n = min(len(acc), len(rej)) if per_class is None else per_class
        if n > len(acc) or n > len(rej):
            raise CountError(
                f"requested {n} samples per class but only {len(acc)} accept / {len(rej)} reject are eligible"
            )
        pick_a = np.sort(rng.choice(acc, size=n, replace=False))
        pick_r = np.sort(rng.choice(rej, size=n, replace=False))
        chosen = np.concatenate([pick_a, pick_r])
        chosen_labels = np.concatenate([np.full(n, ACCEPT, np.int8), np.full(n, REJECT, np.int8)])

    w, l = np.unravel_index(chosen, labels.shape)
    blocks = window_blocks(tensor.values, kernel_depths)[w, l]  # (n, K, N)
    x = stack_block(blocks).astype(np.float32)
    if normalization == NORMALIZE_RMS:
        scale = rms_scale(x)
        x = x / scale[:, None]
    elif normalization == NORMALIZE_NONE:
        scale = np.ones(len(x), dtype=np.float32)
    else:
        raise DataError(f"unknown normalization {normalization!r}")

    y = None
    if not len(unlabeled):
        y = np.where((chosen_labels == ACCEPT)[:, None], x, np.float32(0.0)).astype(np.float32)
    pixel_index = np.column_stack([np.full(len(w), frame_index), w, l]).astype(np.int32)
    return LabeledDataset(
        x=x,
        y=y,
        label=chosen_labels,
        pixel_index=pixel_index,
        scale=scale,
        domain_tag=tensor.domain_tag,
        kernel_depths=kernel_depths,
        num_elements=tensor.config.num_elements,
        normalization=normalization,
        provenance={"frame_index": frame_index, "seed": seed, **tensor.meta.get("provenance", {})},
    )


def reconstruct(outputs: np.ndarray, shape, kernel_depths: int, dtype=np.complex64) -> np.ndarray:
    """Overlap-average sliding-window outputs back onto ``shape = (D, L, N)``.

    ``outputs`` has shape ``(W, L, d)`` with ``W = D - kernel_depths + 1``.
    Accumulation runs in double precision so that averaging identical
    single-precision contributions returns them exactly.
    """
    depths, lateral, n_el = shape
    num_windows = depths - kernel_depths + 1
    expected = (num_windows, lateral, sample_dim(kernel_depths, n_el))
    if outputs.shape != expected:
        raise CoverageError(f"outputs shape {outputs.shape} does not cover window grid {expected}")
    if not np.all(np.isfinite(outputs)):
        raise CoverageError("outputs contain missing (non-finite) window positions")
    blocks = unstack_block(outputs.astype(np.float64), kernel_depths, n_el)  # (W, L, K, N)
    acc = np.zeros((depths, lateral, n_el), dtype=np.complex128)
    for k in range(kernel_depths):
        acc[k : k + num_windows] += blocks[:, :, k, :]
    return (acc / coverage_counts(depths, kernel_depths)[:, None, None]).astype(dtype)


def coverage_counts(depths: int, kernel_depths: int) -> np.ndarray:
    """Number of sliding windows covering each depth index."""
    num_windows = depths - kernel_depths + 1
    counts = np.zeros(depths, dtype=np.int64)
    for k in range(kernel_depths):
        counts[k : k + num_windows] += 1
    return counts


def apply_network(tensor: FocusedTensor, fn, kernel_depths: int, normalization: str = NORMALIZE_RMS,
                  chunk_columns: int = 16) -> FocusedTensor:
    """Run ``fn`` on every sliding window and overlap-average the outputs.

    ``fn`` maps a ``(n, d)`` float32 array to ``(n, d)``. With rms
    normalization each window is divided by its own rms before ``fn`` and
    multiplied back afterwards. Columns are processed in chunks to bound memory.
    """
    depths, lateral, n_el = tensor.shape
    out = np.empty(tensor.shape, dtype=np.complex64)
    for c0 in range(0, lateral, chunk_columns):
        sub = tensor.values[:, c0 : c0 + chunk_columns]
        x = stack_block(window_blocks(sub, kernel_depths)).astype(np.float32)
        flat = x.reshape(-1, x.shape[-1])
        if normalization == NORMALIZE_RMS:
            scale = rms_scale(flat)[:, None]
            y = np.asarray(fn(flat / scale), dtype=np.float32) * scale
        elif normalization == NORMALIZE_NONE:
            y = np.asarray(fn(flat), dtype=np.float32)
        else:
            raise DataError(f"unknown normalization {normalization!r}")
        out[:, c0 : c0 + chunk_columns] = reconstruct(y.reshape(x.shape), sub.shape, kernel_depths)
    return tensor.replace(values=out, meta=dict(tensor.meta))
