"""Exception hierarchy shared by every module."""


class DhgError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DhgError, ValueError):
    """A precondition on an operation's inputs was violated."""


class ShapeError(ContractError):
    pass


class DomainError(ContractError):
    """Input outside the physical domain (e.g. temperature below absolute zero)."""


class ConfigurationError(DhgError):
    pass


class DivergenceError(DhgError, ArithmeticError):
    """Non-finite values appeared during training or integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalError(DhgError, ArithmeticError):
    pass


class InsufficientDataError(ContractError):
    pass


class ParseError(DhgError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateRowError(ParseError):
    pass


class CheckpointError(DhgError):
    pass
