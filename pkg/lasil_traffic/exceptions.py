"""Exception hierarchy for the LASIL traffic simulator.

Every error the command line can report maps to one exit code:
- ConfigError: invalid run configuration (exit 1)
- DataError: malformed or inconsistent input files (exit 2)
- NumericalError: non-finite values during training or simulation (exit 3)
"""

from __future__ import annotations

from .const import EXIT_CONFIG_ERROR, EXIT_DATA_ERROR, EXIT_NUMERICAL_ERROR


class LasilError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class ConfigError(LasilError):
    """Run configuration is invalid."""

    exit_code = EXIT_CONFIG_ERROR


class DataError(LasilError):
    """Input data is malformed or violates a domain invariant."""

    exit_code = EXIT_DATA_ERROR


class NetworkFormatError(DataError):
    """Road network document cannot be parsed or is inconsistent."""


class UnknownRoadError(DataError, KeyError):
    """A road id does not exist in the network."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TrajectoryFormatError(DataError):
    """Trajectory CSV or demand document cannot be parsed."""


class UnroutableAgentError(DataError):
    """No road lies close enough to an agent's first position."""

    def __init__(self, message: str, agent_id: str | None = None) -> None:
        super().__init__(message)
        self.agent_id = agent_id


class NumericalError(LasilError):
    """A loss or state became non-finite."""

    exit_code = EXIT_NUMERICAL_ERROR


class ShapeError(ValueError):
    """Operands of a differentiable operation have incompatible shapes."""


class EmptyNeighborhoodError(ValueError):
    """A graph node has no incoming attention edge."""
