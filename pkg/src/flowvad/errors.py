"""Exception types raised across the package."""


class FlowVADError(Exception):
    """Base class for all package errors."""


class FormatError(FlowVADError):
    """A tensor file has a bad magic, version or dtype code."""


class CorruptionError(FlowVADError):
    """A tensor file is truncated or carries trailing garbage."""


class DatasetError(FlowVADError):
    """A manifest is malformed or references missing files."""


class ConfigError(FlowVADError, ValueError):
    """An invalid configuration was requested."""


class ShapeError(FlowVADError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class InputError(FlowVADError, ValueError):
    """Input values are outside an operation's domain (NaN, negative probabilities, ...)."""


class DegenerateStatisticsError(FlowVADError, ValueError):
    """Normalization statistics cannot be fitted (zero spread or too few samples)."""


class UndefinedMetricError(FlowVADError, ValueError):
    """A metric is undefined for the given labels (e.g. AUROC with one class)."""
