"""Exception hierarchy shared across the package."""


class KVOffloadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KVOffloadError, ValueError):
    pass


class NumericError(KVOffloadError, ValueError):
    pass


class ArgumentError(KVOffloadError, ValueError):
    pass


class ContractError(KVOffloadError, RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class InvariantViolation(KVOffloadError, RuntimeError):
    pass


class ConfigurationError(KVOffloadError, ValueError):
    pass


class ModelingError(KVOffloadError, ValueError):
    pass


class IndexOutOfRange(KVOffloadError, IndexError):
    pass
