"""Exception hierarchy shared across the toolkit."""


class EcgkitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(EcgkitError):
    """Malformed WFDB header, signal, or annotation content."""

    def __init__(self, message, line=None, offset=None):
        if line is not None:
            message = f"line {line}: {message}"
        if offset is not None:
            message = f"byte {offset}: {message}"
        super().__init__(message)
        self.line = line
        self.offset = offset


class FormatError(EcgkitError):
    """Invalid or truncated checkpoint container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"offset {offset}: {message}"
        super().__init__(message)
        self.offset = offset


class ConfigError(EcgkitError):
    """Invalid configuration value, key, or missing prerequisite."""


class SplitError(EcgkitError):
    """Dataset cannot be split as requested."""


class ShapeError(EcgkitError):
    """Tensor shapes incompatible with the requested operation."""


class NumericalError(EcgkitError):
    """Non-finite or numerically unusable values encountered."""


class UsageError(EcgkitError):
    """API called outside its contract."""


class AugmentError(EcgkitError):
    """Synthesis could not produce the requested samples."""


class MetricError(EcgkitError):
    """Metric undefined for the given labels or scores."""


class IoError(EcgkitError):
    """Report or artifact could not be written."""
