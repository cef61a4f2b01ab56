"""Exception types shared across the package.

The CLI maps these onto exit codes: FormatError -> 2, InvariantError -> 3,
NumericError -> 4.
"""


class NvgError(Exception):
    """Base class for all package errors."""


class FormatError(NvgError, ValueError):
    """A file or byte stream does not parse as the expected format."""


class InvariantError(NvgError, ValueError):
    """A domain invariant is violated (imbalanced map, index range, shape)."""


class NumericError(NvgError, ArithmeticError):
    """A numeric failure such as a NaN loss during training."""
