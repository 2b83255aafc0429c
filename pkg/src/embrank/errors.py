"""Exception hierarchy shared across the package."""


class EmbrankError(Exception):
    """Base class for all package errors."""


class UsageError(EmbrankError):
    """Caller violated an interface contract (bad flag, bad argument)."""


class DataError(EmbrankError):
    """Input data is malformed or inconsistent (bad file, bad stage order)."""


class StageOrderError(DataError):
    """A command that needs an earlier training stage was run out of order."""


class TrainingDiverged(EmbrankError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
