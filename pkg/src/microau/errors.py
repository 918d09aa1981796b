"""Exception taxonomy shared by all subsystems.

The CLI maps these onto exit codes: configuration/validation/protocol and
dimension errors exit 1, format and I/O errors exit 2.
"""


class MicroAuError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MicroAuError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericDomainError(MicroAuError):
    """An input lies outside an operation's numeric domain (e.g. log of <= 0)."""


class DeterminismError(MicroAuError):
    """Two supposedly identical forward passes produced different results."""


class ConfigurationError(MicroAuError):
    """A configuration value violates its documented constraints."""


class ValidationError(MicroAuError):
    """Runtime data (labels, sample records, arguments) failed validation."""


class ProtocolError(MicroAuError):
    """An evaluation protocol precondition does not hold (e.g. single subject)."""


class FormatError(MicroAuError):
    """An on-disk artifact is malformed; carries file path and byte offset."""

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        self.path = path
        self.offset = offset
        detail = message
        if path is not None:
            detail += f" [file: {path}"
            if offset is not None:
                detail += f", byte offset: {offset}"
            detail += "]"
        super().__init__(detail)
