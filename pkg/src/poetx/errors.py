"""Shared exception types.

Everything raised on purpose by this package derives from PoetxError so
callers can catch one base class at the CLI boundary and map it to an
exit code.
"""


class PoetxError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PoetxError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(PoetxError, ValueError):
    """Bad configuration value, unknown key, or inconsistent combination."""


class DataError(PoetxError, ValueError):
    """Corpus or input data is missing, empty, or malformed."""


class CheckpointError(PoetxError, ValueError):
    """Checkpoint file is missing, truncated, or has a bad header."""


class StateError(PoetxError, RuntimeError):
    """An object was used out of order (e.g. a tape replayed twice)."""


class NumericsError(PoetxError, ArithmeticError):
    """A numeric invariant was violated (non-finite values, no convergence)."""


class ConvergenceError(NumericsError):
    """Iterative routine hit its sweep cap before reaching tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual
