"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage/config problems exit 2, data
problems exit 3, numeric problems exit 4.
"""


class SeamcamError(Exception):
    """Base class for all package errors."""


class DimensionError(SeamcamError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericDomainError(SeamcamError):
    """An input leaves the documented numeric domain (log of <= 0, NaN loss)."""


class ParameterError(SeamcamError):
    """A scalar argument or configuration value is out of range."""


class GraphError(SeamcamError):
    """Misuse of the autodiff graph (non-scalar root, repeated backward)."""


class DataError(SeamcamError):
    """A dataset, checkpoint, or run directory is missing or inconsistent."""


class ParseError(DataError):
    """A file does not conform to its declared format."""


class ConfigError(ParameterError):
    """A run configuration contains unknown keys or invalid values."""
