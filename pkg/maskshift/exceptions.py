"""
Error types raised by the maskshift library.

Every error derives from MaskShiftError so callers (the management command,
the HTTP views) can tell library failures apart from programming errors.
"""


class MaskShiftError(Exception):
    """Base class for all library errors."""


class StructuralError(MaskShiftError, ValueError):
    """Shapes, dimensions or indices do not fit together."""


class DegenerateBatchError(MaskShiftError):
    """A weighted batch has zero total weight."""


class DegenerateSignalError(MaskShiftError):
    """The linear signal has zero variance, so no noise scale can be set."""


class NumericalError(MaskShiftError, ArithmeticError):
    """A factorization failed or a loss/objective became non-finite."""


class CalibrationError(MaskShiftError):
    """The MAR offset search could not bracket or reach the target rate."""


class PairSkipped(MaskShiftError):
    """
    Raised by partial_cov when a variable pair has fewer than two usable
    samples. Such a pair contributes nothing to the objective.
    """

    def __init__(self, var_a, var_b, count):
        self.var_a = var_a
        self.var_b = var_b
        self.count = count
        super().__init__(f'pair ({var_a}, {var_b}) has only {count} usable samples')


class ExperimentFailed(MaskShiftError):
    """
    A run stopped part-way. ``partial`` holds the rows finished before the
    failure; the original error is chained as ``__cause__``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(MaskShiftError):
    """Malformed configuration file, flag or API payload."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}
