"""Exception hierarchy shared across the package."""


class HgmambaError(Exception):
    """Base class for all package errors."""


class ShapeError(HgmambaError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(HgmambaError):
    """A computation produced non-finite values or failed a numeric check."""


class ParseError(HgmambaError):
    """A structure string failed to parse; carries the offending position."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class DataError(HgmambaError):
    """Dataset files are missing, inconsistent, or malformed."""


class ConfigError(HgmambaError):
    """Configuration file failed validation."""


class CheckpointError(HgmambaError):
    """Checkpoint file is corrupt or incompatible."""


class UsageError(HgmambaError):
    """Command-line arguments are invalid for the requested command."""
