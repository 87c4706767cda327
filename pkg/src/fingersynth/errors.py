"""Exception types shared across the toolkit."""


class FingersynthError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(FingersynthError):
    """A configuration value is missing, unknown or out of range."""


class CapabilityError(FingersynthError):
    """A requested component is unavailable in this environment."""


class TrainingDivergedError(FingersynthError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ExtractionError(FingersynthError):
    """Feature extraction produced non-finite activations."""
