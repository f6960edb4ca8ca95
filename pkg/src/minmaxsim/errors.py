"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented contract (shape, range, NaN)."""


class ParameterError(ValueError):
    """A scalar argument is out of its allowed range."""


class ShapeError(ValidationError):
    """Spatial size is incompatible with a network's down-sampling."""


class DatasetError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


class WeightsLoadError(RuntimeError):
    """Pretrained weights file is malformed or does not match the model."""


class TrainingAbort(RuntimeError):
    """Raised when a loss component becomes non-finite."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


class CheckpointError(RuntimeError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointIncompatibleError(CheckpointError):
    pass
