"""Flow-based speech enhancement with adversarial and hybrid refinement."""

__version__ = "0.1.0"

SAMPLE_RATE = 16000


class SefganError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SefganError):
    """Invalid or inconsistent configuration."""


class ShapeError(SefganError):
    """Tensor or signal shape violates an operation's contract."""


class NumericalError(SefganError):
    """Non-finite values or numerically singular operations."""


class DegenerateSignalError(SefganError):
    """Signal has no usable energy for the requested operation."""


class DataError(SefganError):
    """Unreadable, malformed, or mismatched audio/manifest data."""


class CheckpointError(SefganError):
    """Checkpoint cannot be read, or does not match the running config."""
