"""Exception types shared across the package."""


class CovcapsError(Exception):
    """Base class; ``kind`` is the token the CLI prints in its error line."""

    kind = "error"


class DimensionError(CovcapsError, ValueError):
    kind = "dimension"


class BatchSizeError(DimensionError):
    kind = "batch-size"


class ConfigurationError(CovcapsError, ValueError):
    kind = "configuration"


class DataError(CovcapsError, ValueError):
    kind = "data"


class ContractError(CovcapsError, ValueError):
    kind = "contract"


class NumericError(CovcapsError, ArithmeticError):
    kind = "numeric"
