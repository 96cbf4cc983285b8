"""Exception types shared across the package."""


class GmmPlanError(Exception):
    """Base class for all gmmplan errors."""


class InvalidInputError(GmmPlanError, ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(GmmPlanError, ValueError):
    """Inconsistent network/layer shapes or run-configuration values."""


class ParseError(GmmPlanError, ValueError):
    """A serialized artifact could not be parsed.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(GmmPlanError, RuntimeError):
    """Training produced a non-finite loss. Carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class OpenMeshError(GmmPlanError, RuntimeError):
    """Inside/outside queries were requested on a non-watertight mesh."""


class PathNotFoundError(GmmPlanError, RuntimeError):
    """No roadmap path exists. ``side`` names the disconnected endpoint."""

    def __init__(self, side: str, message: str = ""):
        super().__init__(message or f"no path: {side} side is disconnected")
        self.side = side


class NumericalError(GmmPlanError, RuntimeError):
    """A linear-algebra step failed beyond recoverable jitter."""
