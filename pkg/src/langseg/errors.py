"""Exception classes shared across the package."""


class LangsegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LangsegError, ValueError):
    """Tensor or parameter dimensions are incompatible."""


class ContractError(LangsegError, ValueError):
    """An operation precondition was violated."""


class ConfigError(LangsegError, ValueError):
    """A configuration value is out of its allowed range."""


class InputError(LangsegError, ValueError):
    """User-supplied data is missing or unusable."""


class NumericError(LangsegError, ArithmeticError):
    """A computation produced non-finite values."""


class FormatError(LangsegError, ValueError):
    """A serialized artifact (PGM, checkpoint) is malformed."""


class VersionError(FormatError):
    """A serialized artifact has an unsupported format version."""


class CorruptionError(FormatError):
    """A serialized artifact is truncated or internally inconsistent."""
