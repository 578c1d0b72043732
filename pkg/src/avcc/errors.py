"""Exception types shared across the package."""


class AvccError(Exception):
    """Base class for all package errors."""


class ShapeError(AvccError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(AvccError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(AvccError, ValueError):
    """External input (waveform, annotation, file) is malformed."""


class UsageError(AvccError, RuntimeError):
    """An API was called outside its contract."""


class CheckpointError(AvccError, RuntimeError):
    """A checkpoint file is malformed or does not match the live model."""


class DivergenceError(AvccError, RuntimeError):
    """Training produced a non-finite loss."""
