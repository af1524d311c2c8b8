"""Exception hierarchy shared by the library and the command line."""


class CocoaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidModeError(CocoaError, ValueError):
    """Zernike (n, m) pair violating range or parity rules."""


class ConfigurationError(CocoaError, ValueError):
    """Invalid optical, training or run configuration."""


class ShapeError(CocoaError, ValueError):
    """Array dimensions that cannot be combined."""


class DomainError(CocoaError, ValueError):
    """Input value outside the domain of an operation."""


class GenerationError(CocoaError, RuntimeError):
    """Phantom generation could not satisfy its constraints."""


class InputError(CocoaError, ValueError):
    """Measured data unusable for the requested analysis."""


class UndefinedMetricError(CocoaError, ValueError):
    """Metric is undefined for the supplied data (zero variance, single mode...)."""


class NumericalError(CocoaError, FloatingPointError):
    """Non-finite values produced by an iterative algorithm."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class TrainingError(CocoaError, RuntimeError):
    """Optimization diverged; ``trace`` holds the loss history up to failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
