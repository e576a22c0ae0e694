"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
DataError -> 3, RuntimeAbort -> 4.
"""


class MedveilError(Exception):
    """Base class for all package errors."""


class InvalidImageError(MedveilError):
    """Image violates the tensor contract (shape, range, or finiteness)."""


class ShapeMismatchError(MedveilError):
    """Two operands have inconsistent shapes."""


class TokenCountError(MedveilError):
    """Encrypted-feature token count disagrees with its spatial metadata."""


class UnknownBackendError(MedveilError):
    """Requested a backend id outside the closed enumeration."""


class ConfigError(MedveilError):
    """Run configuration is invalid; message names the offending key path."""


class DataError(MedveilError):
    """Corpus, manifest, or other input data is missing or malformed."""


class UnrecoverableError(MedveilError):
    """Recovery was requested but no usable path (sidecar or re-encode) exists."""


class RuntimeAbort(MedveilError):
    """Training or evaluation hit a non-recoverable runtime condition."""
