"""Exception types shared across the package."""


class PCLError(Exception):
    """Base class for all errors raised by this package."""


class BoundsError(PCLError, IndexError):
    """A frame or row index falls outside the valid range."""


class InputError(PCLError, ValueError):
    """A source could not be decoded or has the wrong layout."""


class DomainError(PCLError, ValueError):
    """Data is in the wrong value domain or geometry for an operation."""


class ContractError(PCLError, ValueError):
    """A numerical precondition (e.g. unit norm) does not hold."""


class ConfigError(PCLError, ValueError):
    """Invalid configuration. ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DivergenceError(PCLError, FloatingPointError):
    """Training produced a non-finite or exploding loss."""
