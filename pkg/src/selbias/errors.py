"""Exception hierarchy shared by all modules."""


class SelbiasError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SelbiasError):
    """Malformed, unreadable or out-of-range input data."""


class DegenerateInputError(SelbiasError):
    """Input on which the requested fit is not defined."""


class VerticalLineError(DegenerateInputError):
    """The weighted TLS optimum is a vertical line (infinite slope)."""


class NumericalError(SelbiasError):
    """Overflow, non-finite values or failure to converge."""


class ConfigError(SelbiasError):
    """Invalid parameter or parameter combination."""
