"""Exception types raised by the package."""


class CasmError(Exception):
    """Base class for all package errors."""


class NonFiniteError(CasmError, ValueError):
    """A function or gradient returned a non-finite value."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class EmptySliceError(CasmError, ValueError):
    """The inactive slice {z : W1 y + W2 z in X} is empty."""


class SamplerError(CasmError, RuntimeError):
    """The conditional sampler exhausted its retry budget."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FactorizationError(CasmError, RuntimeError):
    """Cholesky factorization failed even after maximal jitter."""


class CalibrationError(CasmError, RuntimeError):
    """Bias calibration could not reach the target probability.

    ``trace`` holds the ``(beta, estimate)`` pairs evaluated before failing.
    """

    def __init__(self, message, trace=None, reason="bracket"):
        super().__init__(message)
        self.trace = list(trace or [])
        self.reason = reason


class InfeasibleProblemError(CasmError, RuntimeError):
    """The reduced optimization problem has an empty feasible set."""


class ConfigError(CasmError, ValueError):
    """Invalid run configuration."""
