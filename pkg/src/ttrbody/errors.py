"""Exception taxonomy shared by all ttrbody modules."""


class TtrBodyError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(TtrBodyError):
    """Non-finite or otherwise unusable pose/shape parameters."""


class InvalidCameraError(TtrBodyError):
    """Camera parameters outside their valid domain (e.g. scale <= 0)."""


class DimensionError(TtrBodyError):
    """Array shapes inconsistent with the declared layout."""


class ConfigurationError(TtrBodyError):
    """Config values or role tags that cannot be acted on."""


class DataError(TtrBodyError):
    """Semantically invalid data: empty streams, duplicates, missing GT."""


class FormatError(TtrBodyError):
    """File does not parse or validate against its schema."""


class NumericError(TtrBodyError):
    """Non-finite values produced mid-computation."""


class DegenerateGeometryError(TtrBodyError):
    """Point configuration too degenerate for alignment (rank < 2)."""
