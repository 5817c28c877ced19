"""Exception types shared across the package."""


class EvmGuardError(Exception):
    """Base class for all errors raised by this package."""


class MalformedInputError(EvmGuardError):
    """Input text cannot be decoded (bad hex digit, odd length, bad JSON...)."""


class ParseError(EvmGuardError):
    """A persisted file (CSV, vocabulary, table) violates its format."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CoverageError(EvmGuardError):
    """Label arbitration found a class no available tool can decide."""


class ShortageError(EvmGuardError):
    """Not enough records to satisfy a balancing request."""


class ConfigError(EvmGuardError):
    """Invalid configuration value or combination."""


class UsageError(EvmGuardError):
    """An API was called out of order (e.g. backward without forward)."""


class LoadError(EvmGuardError):
    """A model container cannot be loaded (corrupt, truncated, wrong version)."""
