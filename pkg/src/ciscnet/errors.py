"""Exception hierarchy shared by all pipeline stages."""


class CiscNetError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CiscNetError, ValueError):
    pass


class MissingFile(CiscNetError, FileNotFoundError):
    pass


class IoFailure(CiscNetError, OSError):
    pass


class DimensionMismatch(ValidationError):
    pass


class HeterogeneousDimensions(ValidationError):
    pass


class InconsistentLabels(ValidationError):
    """An instance label covers pixels of more than one class.

    ``label`` is the offending instance id, or ``None`` when the instance and
    class maps disagree about which pixels are foreground.
    """

    def __init__(self, label, message=None):
        self.label = label
        if message is None:
            message = f"instance {label} spans more than one class"
        super().__init__(message)


class InvalidWeights(ValidationError):
    pass


class DimensionTooSmall(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class IndivisibleGroups(ValidationError):
    pass


class IndivisibleDimensions(ValidationError):
    pass


class EmptyAfterFilter(CiscNetError):
    pass


class OutOfRange(ValidationError):
    pass


class StepOutOfRange(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class EmptyInstance(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooFewPatches(ValidationError):
    pass


class CheckpointError(CiscNetError):
    pass
