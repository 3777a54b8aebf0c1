"""Exception and warning types shared across the package."""


class IdmselectError(Exception):
    """Base class for all package errors."""


class DataError(IdmselectError):
    """Invalid input data: missing file, unparsable cell, violated record invariant."""


class SupportError(IdmselectError):
    """Time point outside the support of a spline baseline."""


class EvaluationError(IdmselectError):
    """Likelihood or derivative evaluation produced a non-finite intermediate."""

    def __init__(self, message: str, subject_ids: tuple = ()):
        super().__init__(message)
        self.subject_ids = tuple(subject_ids)


class ConvergenceError(IdmselectError):
    """An optimizer failed to converge and no usable iterate is available."""


class SelectionError(IdmselectError):
    """Model selection could not produce a candidate (all fits failed)."""


class ConfigError(IdmselectError):
    """Malformed or schema-violating run configuration."""


class BoundaryLikelihoodWarning(UserWarning):
    """A subject contributed zero likelihood (log-contribution is -inf)."""
