"""Exception types shared across the package."""


class E2POError(Exception):
    """Base class for package-specific failures."""


class NumericalFailure(E2POError):
    """A computation produced non-finite values.

    ``where`` pinpoints the failing step or parameter index so long runs
    can be debugged from the message alone.
    """

    def __init__(self, message: str, where=None):
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)
        self.where = where


class NoContentError(E2POError):
    """A prompt contains no optimizable content tokens."""


class ConfigError(E2POError):
    """A config file or CLI argument is invalid; message names the key."""
