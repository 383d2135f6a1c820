"""Exception hierarchy shared by every module."""


class BusError(Exception):
    """Base class for all package errors."""


class ShapeError(BusError, ValueError):
    pass


class NumericError(BusError, ArithmeticError):
    pass


class DomainError(BusError, ValueError):
    """A scalar argument lies outside its admissible range."""


class ConfigError(BusError, ValueError):
    pass


class DataError(BusError, ValueError):
    pass


class StateError(BusError, RuntimeError):
    """An operation was requested before the state it depends on exists."""


class FormatError(BusError, ValueError):
    """A binary container is malformed, truncated or of an unknown version."""


class BenchEnvironmentError(BusError, RuntimeError):
    pass
