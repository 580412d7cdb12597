"""Exception taxonomy shared across the package.

CLI exit codes map onto these: configuration errors exit 2, data-format
errors exit 3, numerical aborts exit 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown scheme, missing teacher, bad field."""


class FormatError(ValueError):
    """Malformed on-disk artifact; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalAbort(RuntimeError):
    """Training or evaluation hit a non-finite value."""
