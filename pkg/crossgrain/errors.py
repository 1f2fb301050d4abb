"""Exception hierarchy for crossgrain.

Every error raised on purpose by the library derives from
:class:`CrossGrainError`.  Errors describing bad values or shapes also derive
from :class:`ValueError` so callers can catch either.
"""

from __future__ import annotations


class CrossGrainError(Exception):
    """Base class for all crossgrain errors."""


# ---------------------------------------------------------------------------
# Numeric errors
# ---------------------------------------------------------------------------

class ShapeError(CrossGrainError, ValueError):
    """Raised when array shapes do not line up.

    Attributes:
        shapes -- the offending shapes, in argument order
    """

    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        super().__init__(message)
        self.shapes = shapes


class NumericError(CrossGrainError, ArithmeticError):
    """Raised when a computation produces NaN or infinity."""


class EvaluationError(NumericError):
    """Raised when a function or metric cannot be evaluated."""


class DivergenceError(NumericError):
    """Raised when training produces a non-finite loss or update.

    Attributes:
        phase -- training phase name ("" when raised below the pipeline)
        epoch -- zero-based epoch index where divergence was detected
    """

    def __init__(self, message: str, *, epoch: int, phase: str = "") -> None:
        super().__init__(message)
        self.epoch = epoch
        self.phase = phase


# ---------------------------------------------------------------------------
# Input / usage errors
# ---------------------------------------------------------------------------

class DomainError(CrossGrainError, ValueError):
    """Raised when an input lies outside the domain of an operation."""


class PreconditionError(CrossGrainError, ValueError):
    """Raised when a documented precondition does not hold."""


class PairingError(CrossGrainError, ValueError):
    """Raised when two batches that must be row-aligned are not."""


class ConfigurationError(CrossGrainError, ValueError):
    """Raised for invalid or contradictory configuration."""


class UsageError(ConfigurationError):
    """Raised for unknown tags or flags passed by the caller."""


class CompatibilityError(CrossGrainError, ValueError):
    """Raised when a checkpoint does not fit the config or dataset."""


# ---------------------------------------------------------------------------
# Data files
# ---------------------------------------------------------------------------

class FormatError(CrossGrainError, ValueError):
    """Raised when a data file does not follow its declared format.

    Attributes:
        path -- the file being read
        line -- one-based line number of the problem (0 if not line-specific)
    """

    def __init__(self, message: str, *, path: str = "", line: int = 0) -> None:
        where = f"{path}:{line}" if line else path
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class DataValidationError(CrossGrainError, ValueError):
    """Raised when well-formed data violates a content rule.

    Attributes:
        cap -- the limit that was exceeded, if any
    """

    def __init__(self, message: str, *, cap: int | None = None) -> None:
        super().__init__(message)
        self.cap = cap


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(CrossGrainError):
    """Base class for checkpoint read/write failures."""


class UnsupportedVersionError(CheckpointError):
    """Raised when a checkpoint was written by an unsupported format version."""

    def __init__(self, found: int, expected: int) -> None:
        super().__init__(
            f"unsupported checkpoint version {found} (this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


class CorruptCheckpointError(CheckpointError):
    """Raised when a checkpoint is truncated or fails its integrity check."""
