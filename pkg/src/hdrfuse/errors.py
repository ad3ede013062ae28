"""Exception hierarchy. Every error carries the CLI exit code of its family:
2 configuration, 3 I/O, 4 model/data mismatch, 5 numeric failure."""


class HdrfuseError(Exception):
    exit_code = 1


class ConfigError(HdrfuseError):
    """Bad or inconsistent configuration."""
    exit_code = 2


class BadConfig(ConfigError):
    pass


class BadEV(ConfigError):
    """Exposure-value list is not strictly increasing or has the wrong length."""
    pass


class IOFailure(HdrfuseError):
    """Filesystem or codec failure."""
    exit_code = 3


class MissingFile(IOFailure):
    pass


class CorruptHeader(IOFailure):
    """Unparseable or truncated image file."""
    pass


class WrongChannelCount(IOFailure):
    pass


class MissingPrediction(IOFailure):
    pass


class DataMismatch(HdrfuseError):
    """Inputs that do not fit each other or the model."""
    exit_code = 4


class ShapeMismatch(DataMismatch):
    pass


class BadSpatialDims(DataMismatch):
    """Spatial dims not divisible by the network's downsampling factor."""
    pass


class ArityMismatch(DataMismatch):
    """Wrong number of inputs for a fixed-arity aggregator."""
    pass


class SlotOutOfRange(DataMismatch):
    pass


class PatchTooLarge(DataMismatch):
    pass


class EmptyDataset(DataMismatch):
    pass


class ModeDataMismatch(DataMismatch):
    """Training mode requires data the dataset does not carry."""
    pass


class SoftMaskRejected(DataMismatch):
    """Operation requires hard {0,1} masks."""
    pass


class ImageTooSmall(DataMismatch):
    pass


class NonPositiveExposure(DataMismatch):
    pass


class NumericError(HdrfuseError):
    """NaN or other numeric failure detected at runtime."""
    exit_code = 5
