"""Exception hierarchy shared by all trunksnn modules."""


class TrunkSNNError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(TrunkSNNError, ValueError):
    pass


class ShapeError(TrunkSNNError, ValueError):
    pass


class GearRangeError(InvalidInputError):
    pass


class GradientExplosionError(TrunkSNNError, ArithmeticError):
    """Non-finite value met during the backward pass."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite gradient at backward step t={step}")


class NonFiniteGradientError(TrunkSNNError, ArithmeticError):
    """An optimizer received a NaN/Inf gradient component."""

    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"non-finite gradient component at index {self.index}")


class FileFormatError(TrunkSNNError):
    """Base for binary file problems (dataset and checkpoint files)."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


class SpecMismatchError(TrunkSNNError):
    """Arm spec of a dataset/checkpoint does not match the one in use."""


class IncompatibleCheckpointError(TrunkSNNError):
    pass


class TrainingDivergedError(TrunkSNNError, ArithmeticError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, step, checkpoint):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"training diverged at update {step}")


class ConfigError(TrunkSNNError, ValueError):
    pass
