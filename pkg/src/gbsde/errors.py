"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class GBSDEError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(GBSDEError):
    """Invalid configuration (bad parameters, inconsistent dimensions)."""


class InvalidInputError(GBSDEError, ValueError):
    """An argument violates an operation's precondition."""


class NumericalDomainError(GBSDEError, ArithmeticError):
    """A computation produced a non-finite value or left its domain."""


class ExprSyntaxError(ConfigError):
    """Expression source could not be parsed.

    Carries the 1-based ``line`` and ``column`` of the offending token.
    """

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DiagonalityError(ConfigError):
    """A generator referenced another component's z-row."""


class ContractionError(GBSDEError):
    """Picard iteration stopped contracting: the interval is too long."""

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


class CFLError(GBSDEError):
    """Explicit finite-difference step violates the stability bound."""

    def __init__(self, message: str, dt_required: float):
        super().__init__(message)
        self.dt_required = dt_required


class StitchError(GBSDEError):
    """Adaptive interval halving fell below a single time step."""
