"""Error taxonomy shared across the package."""


class DualStreamError(Exception):
    """Base class for all package errors."""


class DimensionError(DualStreamError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(DualStreamError, ValueError):
    """A configuration value is missing, malformed, or out of range."""


class ContractError(DualStreamError, ValueError):
    """A caller violated an operation precondition."""


class DegenerateVectorError(DualStreamError, ValueError):
    """A vector with (near-)zero norm reached a normalization step."""


class FormatError(DualStreamError, ValueError):
    """An on-disk artifact does not match its declared binary layout."""


class DataError(DualStreamError, ValueError):
    """Dataset contents are invalid (e.g. label out of range)."""


class StructureError(DualStreamError, ValueError):
    """Two parameter trees that must mirror each other do not."""
