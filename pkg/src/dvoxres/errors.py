"""Exception hierarchy shared across the package."""


class DVoxError(Exception):
    """Base class for all package errors."""


class ShapeError(DVoxError, ValueError):
    pass


class ConfigError(DVoxError, ValueError):
    pass


class DataError(DVoxError, ValueError):
    pass


class NumericError(DVoxError, ArithmeticError):
    pass


class FormatError(DVoxError, ValueError):
    """Malformed checkpoint or volume file."""


class TransferError(DVoxError, ValueError):
    pass


class UndefinedMetricError(DVoxError, ValueError):
    pass


class StratificationError(DVoxError, ValueError):
    pass


class DegenerateTestError(DVoxError, ValueError):
    pass


class CapacityError(DVoxError, MemoryError):
    pass
