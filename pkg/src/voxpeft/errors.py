"""Exception types shared across the package."""


class VoxpeftError(Exception):
    """Base class for all package errors."""


class DimensionError(VoxpeftError):
    """Tensor or volume shapes do not line up."""


class ConfigError(VoxpeftError):
    """An architecture, method, or experiment configuration is invalid."""


class FeasibilityError(ConfigError):
    """A fine-tuning plan cannot be applied to the given model."""


class NumericError(VoxpeftError):
    """A numeric failure (NaN/Inf) was detected during computation."""


class IdempotencyError(VoxpeftError):
    """A one-shot model transformation was requested twice."""


class CheckpointError(VoxpeftError):
    """A checkpoint file is unreadable or does not match the model."""


class VolumeIOError(VoxpeftError):
    """Base class for volume-file problems."""


class VolumeHeaderError(VolumeIOError):
    """The volume file header is missing, unterminated, or not valid JSON."""


class VolumePayloadError(VolumeIOError):
    """The volume payload is shorter than the header promises."""


class VolumeShapeError(VolumeIOError):
    """Header dims disagree with the number of scalars in the payload."""
