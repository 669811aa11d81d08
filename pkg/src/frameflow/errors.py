"""Error types shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 1,
NumericError -> 2. Everything else is a plain bug and escapes loudly.
"""


class ValidationError(ValueError):
    """Bad arguments, shapes, config keys, or file contents."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (NaN/Inf loss, corrupt tensors)."""
