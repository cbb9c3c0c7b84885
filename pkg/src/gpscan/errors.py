"""Exception hierarchy shared across the package."""


class GPScanError(Exception):
    """Base class for all package errors."""


class InputError(GPScanError, ValueError):
    """Malformed or inconsistent input (shapes, ranges, arguments)."""


class NumericalError(GPScanError, ArithmeticError):
    """A factorization failed even after jitter escalation."""


class FitError(GPScanError):
    """Every hyperparameter optimization start failed.

    ``best`` carries the best hyperparameters seen (possibly the initial ones).
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateSubsetError(GPScanError, ValueError):
    """The mean-shift MLE is undefined for the given subset."""


class SearchRefusedError(GPScanError, ValueError):
    """A search was asked to run outside its permitted size."""


class ConfigMismatchError(GPScanError, ValueError):
    """Results and null distribution come from different scan settings."""


class IngestionError(GPScanError):
    """Too many input rows failed to parse."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
