"""Exception hierarchy shared across the package.

Every error carries an exit code used by the command-line front door.
"""

from __future__ import annotations


class AmmnetError(Exception):
    exit_code = 1


class DimensionError(AmmnetError, ValueError):
    exit_code = 2


class ConfigError(AmmnetError, ValueError):
    exit_code = 2


class InvariantError(AmmnetError, RuntimeError):
    exit_code = 4


class NumericError(AmmnetError, ArithmeticError):
    exit_code = 4


class GraphError(AmmnetError, RuntimeError):
    exit_code = 4


class DataError(AmmnetError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed on-disk container; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(DataError):
    pass


class VersioningError(DataError):
    pass
