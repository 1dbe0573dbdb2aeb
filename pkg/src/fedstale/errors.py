"""Exception hierarchy shared by the simulator, the analysis code and the CLI.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class FedStaleError(Exception):
    exit_code = 1


class ConfigError(FedStaleError, ValueError):
    """Invalid counts, dimensions, or experiment settings."""

    exit_code = 3


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ShapeError(FedStaleError, ValueError):
    exit_code = 3


class DomainError(FedStaleError, ValueError):
    exit_code = 3


class ModeError(ConfigError):
    """An operation was requested under a staleness mode it does not support."""


class NumericalError(FedStaleError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericalError):
    """Raised when the server parameter leaves the finite / bounded region.

    ``records`` holds whatever round records were produced before the failure;
    ``run_training`` fills it in so callers keep the partial trajectory.
    """

    def __init__(self, round_index: int, message: str = "", records=None) -> None:
        self.round_index = round_index
        self.records = list(records) if records is not None else []
        super().__init__(message or f"divergence at round {round_index}")


class BoundInapplicableError(FedStaleError, ValueError):
    exit_code = 2


class UndefinedCoherenceError(FedStaleError, ValueError):
    exit_code = 2
