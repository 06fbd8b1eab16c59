"""Exception types shared across the package."""


class OsparseError(Exception):
    """Base class for all package errors."""


class ShapeError(OsparseError, ValueError):
    pass


class NumericError(OsparseError, ArithmeticError):
    pass


class ContractError(OsparseError):
    """A caller violated an operation's precondition."""


class DegeneratePrototype(OsparseError, ValueError):
    pass


class EmptyMask(OsparseError, ValueError):
    pass


class StateError(OsparseError):
    pass


class ConfigError(OsparseError, ValueError):
    pass


class GenError(OsparseError):
    pass


class FormatError(OsparseError, ValueError):
    pass


class IoError(OsparseError, OSError):
    pass


class CorruptCheckpoint(OsparseError):
    pass
