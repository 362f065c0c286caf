"""Exception hierarchy shared by every module."""


class MdaError(Exception):
    """Base class for all errors raised by mdamerge."""

    exit_code = 2


class InvalidArgumentError(MdaError, ValueError):
    pass


class ShapeMismatchError(MdaError, ValueError):
    pass


class DegenerateInputError(MdaError, ValueError):
    """Input has zero norm, is rank deficient, or otherwise has no defined answer."""

    exit_code = 3


class FactorizationError(MdaError, ArithmeticError):
    exit_code = 3


class DivergenceError(MdaError, ArithmeticError):
    """Optimisation produced a non-finite loss; carries the trace so far."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class FormatError(MdaError, ValueError):
    """Malformed checkpoint container. ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
