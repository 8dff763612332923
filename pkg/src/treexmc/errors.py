"""Exception hierarchy shared across the package."""


class TreexmcError(Exception):
    """Base class for all package errors."""


class DataError(TreexmcError):
    """Malformed or out-of-contract input data (maps to CLI exit code 3)."""


class FormatError(DataError):
    """Text parsing failure, reported with a line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class StorageError(DataError):
    """Binary artifact cannot be read back (bad magic/version/length/checksum)."""


class InvariantError(TreexmcError):
    """Internal invariant violated (maps to CLI exit code 4)."""
