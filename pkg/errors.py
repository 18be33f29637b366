"""Exception hierarchy shared by the library modules and the CLI.

The CLI maps these onto exit codes: configuration and domain problems exit with 2,
numerical failures with 3.
"""

from __future__ import annotations


class GotError(Exception):
    """Base class for all library errors."""


class DomainError(GotError, ValueError):
    """Input violates a documented precondition (bad coordinate, mixed kinds, CFL, ...)."""


class GraphDomainError(DomainError):
    """Graph is invalid for the requested operation (disconnected, unknown edge, ...)."""


class ResolutionError(DomainError):
    """Raster spacing is too coarse for the requested tube."""


class ConfigError(GotError, ValueError):
    """Experiment configuration could not be parsed or validated."""


class SolverError(GotError, RuntimeError):
    """A numerical solver failed."""


class InfeasibilityError(SolverError):
    """No transport plan with finite cost exists."""


class ConvergenceError(SolverError):
    """Iteration budget exhausted before reaching the requested tolerance."""

    def __init__(self, message: str, residuals: dict[str, float] | None = None) -> None:
        super().__init__(message)
        self.residuals = dict(residuals or {})


class BoundViolationError(SolverError):
    """A certified inequality (duality gap, stability bound) did not hold."""


EXIT_OK = 0
EXIT_INTERNAL = 1  # unexpected failure outside the library error hierarchy
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def exit_code_for(exc: BaseException) -> int:
    """Return the CLI exit code for an exception raised by a command."""
    if isinstance(exc, SolverError):
        return EXIT_SOLVER
    return EXIT_CONFIG


__all__ = [
    "GotError",
    "DomainError",
    "GraphDomainError",
    "ResolutionError",
    "ConfigError",
    "SolverError",
    "InfeasibilityError",
    "ConvergenceError",
    "BoundViolationError",
    "EXIT_OK",
    "EXIT_INTERNAL",
    "EXIT_CONFIG",
    "EXIT_SOLVER",
    "exit_code_for",
]
