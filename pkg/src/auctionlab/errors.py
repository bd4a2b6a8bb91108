"""Exception types shared across the package."""


class AuctionLabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AuctionLabError):
    """Invalid configuration value or malformed config file."""


class ContractViolation(AuctionLabError):
    """A caller broke a documented precondition (bad allocation, impossible input)."""


class SchemaError(AuctionLabError):
    """A CSV or checkpoint file does not match its documented layout."""


class MissingInputError(AuctionLabError):
    """A required input file is absent; the message names the path."""


class NumericalFault(AuctionLabError):
    """Non-finite value produced where a finite one is required (training guard)."""
