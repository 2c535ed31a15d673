"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError``, ``DomainError`` and ``FormatError`` -> 2,
``NumericalError`` -> 3.
"""

from __future__ import annotations


class SoftpadError(Exception):
    """Base class for all package errors."""


class ConfigError(SoftpadError, ValueError):
    """Invalid configuration value or missing/unparseable config file."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DomainError(SoftpadError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class FormatError(SoftpadError, ValueError):
    """A text input could not be parsed; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshFormatError(FormatError):
    """Malformed mesh file."""


class LogFormatError(FormatError):
    """Malformed contact log or frame log."""


class NumericalError(SoftpadError, RuntimeError):
    """A numerical procedure failed (NaN, singular system, rank deficiency)."""


class SolverAbort(NumericalError):
    """Time stepping aborted; ``state`` holds the last finite state."""

    def __init__(self, message: str, state=None, partial=None):
        super().__init__(message)
        self.state = state
        self.partial = partial


class TopologyError(SoftpadError, ValueError):
    """Surface patch is not a topological disk."""


class ExtrapolationError(DomainError):
    """Query outside the tabulated range of a response surface."""


class CalibrationInfeasible(NumericalError):
    """Every candidate simulation failed during a fit."""
