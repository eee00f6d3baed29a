"""Exception hierarchy shared across the package."""


class NutriscopeError(Exception):
    """Base class for all package errors."""


class DimensionError(NutriscopeError):
    """Shapes or extents are inconsistent with an operation's contract."""


class ContractError(NutriscopeError):
    """An API was called outside its documented contract."""


class NumericError(NutriscopeError):
    """Numeric integrity violated: non-finite values or residuals above tolerance."""


class DegenerateInputError(NutriscopeError):
    """Input is valid in shape but degenerate in value (zero vector, constant fit, ...)."""


class ParameterError(NutriscopeError):
    """A scalar parameter is outside its allowed range."""


class ConfigError(NutriscopeError):
    """Configuration file or override is malformed, unknown, or invalid."""


class DataError(NutriscopeError):
    """Dataset content or I/O problem; message names the offending sample or file."""


class CheckpointMismatchError(NutriscopeError):
    """Checkpoint architecture does not match the requested model."""
