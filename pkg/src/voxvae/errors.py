"""Exception types shared across the package."""


class VoxvaeError(Exception):
    pass


class ShapeError(VoxvaeError, ValueError):
    pass


class FormatError(VoxvaeError, ValueError):
    """File contents do not match the expected container layout."""


class UnsupportedError(VoxvaeError, NotImplementedError):
    pass


class DataError(VoxvaeError, ValueError):
    """Non-finite or otherwise unusable numeric payload."""


class NumericError(VoxvaeError, ArithmeticError):
    pass


class StateError(VoxvaeError, RuntimeError):
    """Operation called on an object that is not ready for it (e.g. unfitted)."""


class UndefinedMetricError(VoxvaeError, ValueError):
    pass


class StratificationError(VoxvaeError, ValueError):
    pass


class GraphError(VoxvaeError, RuntimeError):
    pass


class TrainingDiverged(VoxvaeError, FloatingPointError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
