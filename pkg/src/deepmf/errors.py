"""Exception types shared across the package."""


class DeepmfError(Exception):
    """Base class for all package errors."""


class ConfigError(DeepmfError):
    """Invalid configuration: bad fractions, schedules, unknown keys, ..."""


class DimensionError(DeepmfError):
    """Tensor or model shapes do not compose."""


class NonFiniteError(DeepmfError):
    """A value that must be finite is NaN or infinite."""


class StateError(DeepmfError):
    """Operation applied in the wrong state (e.g. scaling twice)."""


class ParseError(DeepmfError):
    """A data file could not be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class FormatError(DeepmfError):
    """A serialized artifact (model file, manifest) is corrupt or has the wrong version."""


class DivergenceError(DeepmfError):
    """Training diverged (non-finite or exploding loss)."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
