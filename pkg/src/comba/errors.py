"""Exception types raised across the package."""


class CombaError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CombaError, ValueError):
    pass


class DataFormatError(CombaError, ValueError):
    """A dataset file could not be parsed. Carries the offending line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class NonFiniteError(InvalidArgument):
    """NaN or infinity reached an operation that needs finite input."""


class ValidationError(CombaError, ValueError):
    pass


class CheckpointError(CombaError):
    """Checkpoint names or shapes do not match the target model."""


class UndefinedMetricError(CombaError, ValueError):
    pass


class TrainingDiverged(CombaError, RuntimeError):
    pass
