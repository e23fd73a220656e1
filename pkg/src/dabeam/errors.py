"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see :mod:`dabeam.cli`).
"""


class DabeamError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(DabeamError, ValueError):
    """Invalid geometry, inconsistent parameters or malformed config files."""

    exit_code = 2


class DataError(DabeamError, ValueError):
    """Input data that cannot be processed (empty frames, missing ROIs, ...)."""

    exit_code = 3


class OutOfBoundsError(DataError):
    """Pixels whose focusing delays fall outside the recorded time window."""

    def __init__(self, message, pixels=None):
        super().__init__(message)
        self.pixels = pixels if pixels is not None else []


class CoverageError(DataError):
    """Sliding-window outputs do not cover the full reconstruction grid."""


class CountError(DataError):
    """Fewer eligible examples than requested."""


class MetricError(DataError):
    """An image-quality metric is undefined for the given ROI statistics."""


class TrainingFault(DabeamError, RuntimeError):
    """A loss term became non-finite or diverged during optimization."""

    exit_code = 4

    def __init__(self, term, value, step=None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term {term!r} diverged{where}: {value!r}")
