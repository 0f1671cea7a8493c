"""Exception hierarchy shared by the pipeline stages."""


class SludgeVisionError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(SludgeVisionError, ValueError):
    """Bad user input: manifests, configs, parameters."""


class ManifestParseError(ValidationError):
    pass


class ManifestIntegrityError(ValidationError):
    pass


class ImageDecodeError(ValidationError):
    pass


class PretrainedUnavailableError(SludgeVisionError):
    pass


class TrainingError(SludgeVisionError, RuntimeError):
    """Raised when optimisation cannot proceed (empty splits, NaN loss, ...)."""

    def __init__(self, message, fold=None):
        self.fold = fold
        if fold is not None:
            message = f"fold {fold}: {message}"
        super().__init__(message)
