"""Exception hierarchy shared by the pipeline and the command line."""


class CropMapError(Exception):
    """Base class for all errors raised by cropmap."""


class DomainError(CropMapError, ValueError):
    """An input lies outside the domain of an operation."""


class SchemaError(CropMapError, ValueError):
    """A file or config document does not match its schema."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class PreconditionError(CropMapError):
    """Inputs are individually valid but cannot be combined (e.g. no time overlap)."""
