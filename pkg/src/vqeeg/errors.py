"""Exception types shared across the toolkit."""


class VqeegError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(VqeegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(VqeegError, ValueError):
    """A configuration value violates a documented constraint."""


class FormatError(VqeegError, ValueError):
    """A binary file is malformed. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class GradientError(VqeegError, RuntimeError):
    """An analytic gradient is non-finite or otherwise unusable."""


class UndefinedMetricError(VqeegError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""


class TrainingDiverged(VqeegError, RuntimeError):
    """Training loss became non-finite. Carries the last good checkpoint."""

    def __init__(self, message: str, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
