"""Shared exception types. The CLI maps these onto exit codes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes or dtypes do not conform to an op's rule."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class DataFormatError(ValueError):
    """An external file does not match its documented binary layout."""
