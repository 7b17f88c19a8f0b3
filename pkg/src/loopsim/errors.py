"""Exception types raised by the engine, loaders and harness."""

from __future__ import annotations


class LoopsimError(Exception):
    """Base class for every error raised by loopsim."""

    kind = "LoopsimError"

    def __init__(self, message: str = "", step: int | None = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        msg = super().__str__()
        if self.step is not None:
            return f"{msg} (step {self.step})"
        return msg


class SimulationError(LoopsimError):
    """A failure while advancing the simulation."""

    kind = "SimulationError"


class ZeroMassBody(SimulationError):
    kind = "ZeroMassBody"


class NonFiniteState(SimulationError):
    kind = "NonFiniteState"


class NonFiniteLambda(SimulationError):
    kind = "NonFiniteLambda"


class SingularSystem(SimulationError):
    kind = "SingularSystem"


class InconsistentInitialization(SimulationError):
    """Initial geometry cannot be projected onto the constraint manifold."""

    kind = "InconsistentInitialization"


class UnknownBody(LoopsimError):
    kind = "UnknownBody"


class MotorOnUnsupportedJoint(LoopsimError):
    kind = "MotorOnUnsupportedJoint"


class SchemaError(LoopsimError):
    """Scene or scenario document does not validate; ``path`` names the field."""

    kind = "SchemaError"

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DanglingReference(SchemaError):
    kind = "DanglingReference"


class ChainOrderError(SchemaError):
    kind = "ChainOrderError"


class ConfigError(LoopsimError):
    kind = "ConfigError"
