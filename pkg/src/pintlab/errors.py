"""Exception hierarchy shared across the package."""


class PintError(Exception):
    """Base class for all package errors."""


class ContractError(PintError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor dimensions do not conform."""


class NumericError(PintError):
    """An operation produced NaN or Inf."""


class DivergenceError(PintError):
    """Training produced a non-finite loss; last good checkpoint retained."""


class ConfigError(PintError):
    """Malformed or unknown configuration key/value."""


class DataFormatError(PintError):
    """A binary file does not match its expected format."""


class DataVersionError(DataFormatError):
    """A binary file has an unsupported format version."""


class TruncatedFileError(DataFormatError):
    """A binary file ends before its declared payload."""


class DegenerateInputError(PintError):
    """Input is degenerate for the requested operation (e.g. constant image)."""


class UndefinedMetricError(PintError):
    """A metric is undefined for the given inputs (e.g. empty mask for ASD)."""
