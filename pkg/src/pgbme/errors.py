"""Exception hierarchy. CLI exit codes map onto these classes."""


class PgbmeError(Exception):
    """Base class for package errors."""


class ValidationError(PgbmeError, ValueError):
    """Bad inputs: shapes, references, missing values, flags."""


class NumericalError(PgbmeError, ArithmeticError):
    """A numerical step failed."""


class SamplingError(NumericalError):
    """A truncated draw was requested on a region of negligible mass."""


class DecompositionError(NumericalError):
    """Cholesky factorisation failed.

    ``minor`` is the 1-based order of the first leading minor that is not
    positive definite, when known.
    """

    def __init__(self, message, minor=None):
        super().__init__(message)
        self.minor = minor


class FitError(NumericalError):
    """A sampler step failed mid-chain; ``draws`` holds what was saved."""

    def __init__(self, message, iteration, step, draws=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
        self.draws = draws


class UndefinedMetricError(PgbmeError, ValueError):
    """A metric is undefined for the supplied labels."""
