"""Exception hierarchy shared across the package."""


class StructsegError(Exception):
    """Base class for all package errors."""


class InvalidInput(StructsegError):
    """Input data violates a precondition (non-finite values, too few items, ...)."""


class ConfigError(StructsegError):
    """Configuration value is inconsistent or unusable."""


class ShapeError(StructsegError):
    """Array/tensor shapes do not line up."""


class NumericalError(StructsegError):
    """A non-finite value appeared where the computation requires finite ones."""


class UnknownStructure(StructsegError):
    """A structure name was requested that is not in the token table."""

    def __init__(self, name, available=()):
        self.name = name
        self.available = list(available)
        msg = f"unknown structure {name!r}"
        if self.available:
            msg += f"; available: {', '.join(self.available)}"
        super().__init__(msg)


class DuplicateStructure(StructsegError):
    """A structure name was added that already exists in the token table."""


class UsageError(StructsegError):
    """Command-line usage error."""


class DataError(StructsegError):
    """Dataset directory or manifest is missing or malformed."""
