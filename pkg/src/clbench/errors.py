"""Exception hierarchy shared by every module."""


class CLBenchError(Exception):
    """Base class for all engine errors."""


class DimensionError(CLBenchError, ValueError):
    pass


class ProtocolViolation(CLBenchError):
    """Raised when a continual-learning contract is broken (label leakage,
    future-task queries, overlapping label spaces, ...)."""


class ConfigError(CLBenchError, ValueError):
    pass


class ParameterError(CLBenchError, ValueError):
    pass


class FormatError(CLBenchError):
    pass


class CorruptionError(FormatError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(CLBenchError, ValueError):
    pass


class StateError(CLBenchError):
    pass


class UsageError(CLBenchError):
    pass


class NumericalError(CLBenchError, ArithmeticError):
    """Non-finite values appeared during training."""
