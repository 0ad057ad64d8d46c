"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so keep the split between
usage problems, bad input data, and numerical failures.
"""


class CrowdCountError(Exception):
    """Base class for all package errors."""


class UsageError(CrowdCountError):
    """Bad command line / config usage (exit code 1)."""


class DataError(CrowdCountError):
    """Malformed or inconsistent input data (exit code 2)."""


class ShapeError(DataError):
    """Tensor/array shape mismatch."""


class ModelFormatError(DataError):
    """Corrupt or unreadable model checkpoint file."""


class NumericalError(CrowdCountError):
    """Non-finite values encountered during computation (exit code 3)."""
