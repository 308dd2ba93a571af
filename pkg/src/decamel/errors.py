"""Exception hierarchy shared by every module."""


class DecamelError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DecamelError, ValueError):
    pass


class ParseError(DecamelError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProtocolError(DecamelError, ValueError):
    pass


class InvariantError(DecamelError, RuntimeError):
    pass


class NumericalError(DecamelError, ArithmeticError):
    pass


class TrainingError(NumericalError):
    """Raised when joint training diverges; ``step`` is the failing iteration."""

    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step
