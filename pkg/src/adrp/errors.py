"""Exception types shared across the package."""


class AdrpError(Exception):
    """Base class for all package errors."""


class ContractError(AdrpError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class NumericError(AdrpError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(AdrpError, RuntimeError):
    """Training diverged (e.g. NaN loss)."""


class IntegrityError(AdrpError, IOError):
    """A checkpoint failed validation on load."""


class ConfigError(AdrpError, ValueError):
    """Invalid or unknown configuration key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
