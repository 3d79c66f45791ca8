"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, everything below
exits 2.
"""


class ShapeError(ValueError):
    """An array argument has the wrong rank, extent, or layout."""


class ContractViolation(RuntimeError):
    """A documented precondition or invariant was broken by the caller."""


class DataError(ValueError):
    """An input file is missing, malformed, or inconsistent."""


class EmptyMaskError(DataError):
    """A segment mask contains no pixels."""
