"""Error types mapped to CLI exit codes.

ConfigError -> 1, DataError -> 2, NumericalError -> 3. Anything else that
escapes is a bug and keeps Python's default traceback behaviour.
"""


class RulcastError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(RulcastError):
    """Malformed or inconsistent user configuration."""

    exit_code = 1


class DataError(RulcastError):
    """Unusable input data: missing files, ragged rows, non-numeric cells."""

    exit_code = 2


class NumericalError(RulcastError):
    """Non-finite values produced where finite ones are required."""

    exit_code = 3
