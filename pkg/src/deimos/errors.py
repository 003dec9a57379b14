"""Exception hierarchy.

Two branches matter to callers: :class:`ValidationError` for bad inputs or
configuration (CLI exit code 2) and :class:`NumericalError` for failures of
the linear algebra itself (CLI exit code 3).
"""


class DeimosError(Exception):
    """Base class for all package errors."""


class ValidationError(DeimosError):
    """Input, configuration, or precondition violation."""


class NumericalError(DeimosError):
    """Numerical failure in covariance or acquisition arithmetic."""


class InsufficientSamplesError(ValidationError):
    """Fewer than two dropout realizations; a sample covariance needs J >= 2."""


class InvalidDataError(ValidationError):
    """Non-finite values or malformed probability rows."""


class BatchTooLargeError(ValidationError):
    """Requested batch exceeds the number of available candidates."""


class CombinatorialBlowupError(ValidationError):
    """Exhaustive subset search would exceed the configured subset cap."""


class AlreadyConditionedError(ValidationError):
    """A point was conditioned on (or scored) twice."""


class SingularBlockError(NumericalError):
    """A candidate's diagonal block is numerically singular and no smoothing applies."""


class CorruptedCovarianceError(NumericalError):
    """A covariance diagonal is negative beyond numerical tolerance."""


class TrainingDivergedError(NumericalError):
    """Training produced a non-finite loss."""
