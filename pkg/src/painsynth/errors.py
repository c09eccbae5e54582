"""Exception taxonomy shared across modules, mapped to CLI exit codes."""


class PainsynthError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PainsynthError):
    """Invalid configuration, flags, or argument combinations."""

    exit_code = 2


class DataError(PainsynthError):
    """Corrupt, truncated, or inconsistent data files / datasets."""

    exit_code = 3


class NumericError(PainsynthError):
    """Non-finite losses, gradients, or other numeric faults."""

    exit_code = 4
