"""Exception hierarchy shared across the toolkit."""


class UnpoisonError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(UnpoisonError):
    """Invalid user-supplied configuration (CLI exit code 2)."""


class InputError(UnpoisonError):
    """Structurally invalid inputs to an operation (mismatched shapes, empty sets)."""


class UnsupportedOperationError(UnpoisonError):
    """Operation not defined for this input (e.g. color ops on grayscale)."""


class FeasibilityError(UnpoisonError):
    """Problem size exceeds a hard gate (dense Hessian, leave-one-out sweeps)."""


class TrainingDivergedError(UnpoisonError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training loss became non-finite in epoch {epoch}")


class CraftingFailedError(UnpoisonError):
    """Poison crafting produced a non-finite objective."""


class DetectorFailedError(UnpoisonError):
    """A detector's internal model failed to train."""


class UnlearningDivergedError(UnpoisonError):
    """An unlearning run hit a non-finite loss; partial parameters are invalid."""

    def __init__(self, message: str, partial_params=None):
        self.partial_params = partial_params
        super().__init__(message)


class StageFailureError(UnpoisonError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
