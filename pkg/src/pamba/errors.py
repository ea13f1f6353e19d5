"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ResolutionError(DomainError):
    """Quantized coordinates need more bits per axis than a curve key can hold."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
