"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so raise the most specific one.
"""


class DeskDetrError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DeskDetrError, ValueError):
    """Invalid configuration: unknown keys, bad variant tags, impossible extents."""

    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class ContractError(DeskDetrError, RuntimeError):
    """A call violated an operation precondition (e.g. non-scalar backward)."""

    exit_code = 3


class NumericError(DeskDetrError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    exit_code = 3


class StorageError(DeskDetrError, IOError):
    """Reading or writing an artifact failed."""

    exit_code = 4


class IntegrityError(StorageError):
    """A persisted artifact failed its version, length or checksum verification."""
