"""Exception hierarchy shared across the package.

Two families matter for the CLI exit-code contract: ``ValidationError`` and
its subclasses map to exit code 1 (bad input, bad config, malformed files),
everything under ``NumericError`` / ``UsageError`` maps to exit code 2
(runtime failures).
"""


class CdfscilError(Exception):
    """Base class for all package errors."""


class ValidationError(CdfscilError):
    """Input, argument or configuration violates a documented precondition."""


class FormatError(ValidationError):
    """A file does not parse as the format it claims to be."""


class CorruptionError(ValidationError):
    """A file parses but its payload is inconsistent with its declaration."""


class ScheduleError(ValidationError):
    """A session schedule violates the protocol's structural rules."""


class InsufficientDataError(ValidationError):
    """Not enough samples to satisfy a shot/class request."""


class NumericError(CdfscilError):
    """A numeric computation produced non-finite or degenerate values."""


class DegenerateEmbeddingError(NumericError):
    """An embedding vector has (near-)zero norm and cannot be normalized."""


class TrainingError(NumericError):
    """Optimization diverged (non-finite loss or gradients)."""


class UsageError(CdfscilError):
    """An API was called out of order or against its state contract."""


class FrozenModelError(UsageError):
    """A parameter update was attempted on a frozen network."""
