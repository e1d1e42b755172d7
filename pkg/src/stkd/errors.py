"""Exception hierarchy shared by the pipeline stages."""


class STKDError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(STKDError, ValueError):
    pass


class DataFormatError(STKDError, ValueError):
    pass


class EmptyInputError(DataFormatError):
    pass


class InsufficientDataError(STKDError, ValueError):
    def __init__(self, message: str, required: int):
        super().__init__(message)
        self.required = required


class ValidationError(STKDError, ValueError):
    pass


class ShapeError(STKDError, ValueError):
    pass


class ArchitecturePairingError(ShapeError):
    """Teacher and student feature taps cannot be compared."""


class PruningSequenceError(STKDError, RuntimeError):
    pass


class TrainingDivergence(STKDError, RuntimeError):
    pass


class MissingArtifactError(STKDError, FileNotFoundError):
    pass
