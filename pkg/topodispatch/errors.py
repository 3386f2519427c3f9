from __future__ import annotations


class TopoDispatchError(Exception):
    """Base class for every error raised by topodispatch."""

    exit_code: int = 1


class ConfigError(TopoDispatchError, ValueError):
    exit_code = 2


class NetworkFileError(TopoDispatchError, ValueError):
    """A network or reconfiguration file could not be parsed."""

    exit_code = 2

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None) -> None:
        self.path = path
        self.line = line
        where = ""
        if path:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class ProfileError(TopoDispatchError, ValueError):
    exit_code = 2


class TopologyValidationError(TopoDispatchError, ValueError):
    """A NetworkTopology invariant does not hold; `invariant` names it."""

    exit_code = 3

    def __init__(self, invariant: str, message: str) -> None:
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


class StructuralError(TopoDispatchError, ValueError):
    exit_code = 3


class DimensionMismatchError(TopoDispatchError, ValueError):
    exit_code = 3


class CheckpointError(TopoDispatchError):
    exit_code = 3


class OracleInfeasibleError(TopoDispatchError):
    exit_code = 4


class ShapeError(TopoDispatchError, ValueError):
    exit_code = 5


class InfeasibleOperatingPointError(TopoDispatchError, ArithmeticError):
    exit_code = 5


class TapeError(TopoDispatchError, RuntimeError):
    exit_code = 5


class TrainingFault(TopoDispatchError, ArithmeticError):
    exit_code = 5


class IncompleteEpisodeError(TopoDispatchError, ValueError):
    """An episode log does not end on a terminal step, or ended on a power-flow fault."""

    exit_code = 3
