"""Custom exceptions for IAP recovery operations."""


class IapError(Exception):
    """Base exception for IAP recovery operations."""

    pass


class SchemaError(IapError):
    """Invalid IAP schema or descriptor."""

    pass


class EncodingError(SchemaError):
    """IAP values cannot be encoded or decoded against a schema."""

    pass


class ManifestError(IapError):
    """Malformed slice manifest."""

    pass


class SplitError(IapError):
    """Patient-level split cannot be formed."""

    pass


class ImageLoadError(IapError):
    """Image file unreadable or unusable."""

    pass


class PhantomError(IapError):
    """Phantom rendering or cohort generation failed."""

    pass


class ModelError(IapError):
    """Model construction or forward pass failed."""

    pass


class CheckpointError(IapError):
    """Checkpoint archive cannot be written or read."""

    pass


class SchemaMismatchError(CheckpointError):
    """Checkpoint was trained against a different schema."""

    pass


class TrainingError(IapError):
    """Training run failed."""

    pass


class NonFiniteLossError(TrainingError):
    """A loss term became NaN or infinite."""

    def __init__(self, head: str, epoch: int, value: float):
        self.head = head
        self.epoch = epoch
        self.value = value
        super().__init__(f"Non-finite loss {value} on head '{head}' at epoch {epoch}")


class EvaluationError(IapError):
    """Metric computation failed."""

    pass


class UndefinedRelativeError(EvaluationError):
    """Relative error requested against a zero reference value."""

    pass


class AnalysisError(IapError):
    """Cohort statistics cannot be computed."""

    pass


class RoutingError(IapError):
    """Domain routing or routing experiment failed."""

    pass


class OutputError(IapError):
    """Output directory or artifact cannot be written."""

    pass
