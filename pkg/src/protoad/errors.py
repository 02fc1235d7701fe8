"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters more than the message text.
"""


class ProtoadError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(ProtoadError):
    """Operands with incompatible extents."""


class ConfigError(ProtoadError):
    """Invalid configuration: bad dimensions, counts, flags or files."""


class NumericError(ProtoadError):
    """Non-finite values where finite ones are required."""


class StateError(ProtoadError):
    """Operation incompatible with the current object state."""


class MetricError(ProtoadError):
    """Evaluation impossible, e.g. a single-class test split."""


class CheckpointError(ProtoadError):
    """Corrupt, truncated or incompatible checkpoint file."""


class DegenerateVectorWarning(UserWarning):
    """A zero-norm vector was fed to a cosine distance."""
