"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class DgmeError(Exception):
    """Base class for all toolkit errors."""


class UsageError(DgmeError):
    """Invalid command-line usage or configuration values."""


class DataError(DgmeError):
    """Missing, malformed, or inconsistent input data."""


class NumericError(DgmeError):
    """Non-finite values detected where finite results are required."""
