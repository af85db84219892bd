"""Exception hierarchy; each family maps to one CLI exit code."""


class McadvError(Exception):
    exit_code = 1


class ConfigError(McadvError, ValueError):
    """Invalid configuration or arguments (exit code 1)."""

    exit_code = 1


class ContractError(ConfigError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ConfigError):
    """Tensor shapes do not agree."""


class DataError(McadvError):
    """Unreadable or malformed input data (exit code 2)."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(McadvError, ArithmeticError):
    """Numerical failure: NaN/Inf, divergence (exit code 3)."""

    exit_code = 3


class NonFiniteError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class AttackError(NumericalError):
    pass
