"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``NumericalError`` to
exit code 3.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition."""


class DomainError(ValidationError):
    """An argument lies outside the domain of a function (e.g. a stretch <= 0)."""


class ParseError(ValidationError):
    """A file could not be parsed; the message names line or offset."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class SaturationError(NumericalError):
    """An exponential argument exceeded the overflow guard."""


class IntegrationError(NumericalError):
    """A time integrator produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
