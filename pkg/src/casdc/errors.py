"""Exception types raised across the package."""


class CasDCError(Exception):
    """Base class for all package errors."""


class InvalidPartitionError(CasDCError, ValueError):
    pass


class MissingClassError(CasDCError, ValueError):
    pass


class DatasetFormatError(CasDCError, ValueError):
    pass


class ShapeMismatchError(CasDCError, ValueError):
    pass


class MiningError(CasDCError, ValueError):
    """Raised when a batch lacks the roles required for triplet mining."""

    def __init__(self, message, deficient_role):
        super().__init__(message)
        self.deficient_role = deficient_role


class ConfigurationError(CasDCError, ValueError):
    pass


class TrainingError(CasDCError, RuntimeError):
    """Raised when training diverges (non-finite loss)."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class CalibrationError(CasDCError, ValueError):
    pass


class UndefinedMetricError(CasDCError, ValueError):
    pass


class StageError(CasDCError, RuntimeError):
    """Wraps a failure in one pipeline stage of an experiment run."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class EmptyTripletWarning(UserWarning):
    """Triplet loss evaluated on an empty triplet list."""
