"""Exception hierarchy shared by every metaforge module, plus the CLI exit-code mapping."""

from __future__ import annotations

from collections.abc import Sequence


class MetaforgeError(Exception):
    """Root of all errors raised deliberately by metaforge."""

    exit_code: int = 1


class ConfigError(MetaforgeError):
    """Invalid configuration file, key, value, or environment variable."""

    exit_code = 2


class InfeasibleDesignError(MetaforgeError):
    """A design that cannot be realised on the configured pipe."""

    exit_code = 3


class BoundsError(InfeasibleDesignError):
    """One or more design variables lie outside their bounds."""

    def __init__(self, message: str, indices: Sequence[int] = ()):
        super().__init__(message)
        self.indices: tuple[int, ...] = tuple(indices)


class InfeasibleGeometryError(InfeasibleDesignError):
    """Inserts and gaps do not fit on the pipe."""


class NegativeAnnulusError(InfeasibleDesignError):
    """An insert diameter is smaller than the pipe's outer diameter."""


class DomainError(MetaforgeError, ValueError):
    """An argument outside the mathematical domain of an operation."""


class NumericError(MetaforgeError, ArithmeticError):
    """A quantity became non-finite during evaluation."""


def exit_code_for(exc: BaseException) -> int:
    """Return the process exit status for an exception reaching the CLI boundary."""
    if isinstance(exc, MetaforgeError):
        return exc.exit_code
    return 1
