class HMTLError(Exception):
    """Base class for library errors."""


class InvalidInputError(HMTLError, ValueError):
    pass


class ConstraintViolationError(InvalidInputError):
    pass


class ConfigurationError(HMTLError, ValueError):
    pass


class CheckpointIncompatibleError(HMTLError):
    pass


class DegenerateBatchError(HMTLError, ValueError):
    pass


class DatasetLoadError(HMTLError):
    """Raised with the offending path when annotations are missing or corrupt."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class TrainingDiverged(HMTLError):
    pass
