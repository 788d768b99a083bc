"""Error types raised by the viewmorph library."""


class ViewmorphError(Exception):
    """Base class for all library errors."""


class ShapeError(ViewmorphError, ValueError):
    """Tensor shapes or dimensions are inconsistent with the operation."""


class NumericError(ViewmorphError, ValueError):
    """Non-finite values where finite values are required."""


class LabelError(ViewmorphError, ValueError):
    """A class label is outside its declared range."""


class BatchSizeError(ViewmorphError, ValueError):
    """Batch too small for the requested mode (e.g. batch statistics)."""


class ConfigError(ViewmorphError, ValueError):
    """Invalid configuration key, value, or combination."""


class DataError(ViewmorphError, ValueError):
    """Dataset content is missing, malformed, or inconsistent."""


class CheckpointFormatError(ViewmorphError, ValueError):
    """Checkpoint file has wrong magic bytes or an unsupported version."""


class CheckpointCorruptionError(ViewmorphError, ValueError):
    """Checkpoint file is truncated or internally inconsistent."""
