"""Exception types shared across the package."""


class MmdialError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(MmdialError):
    """Operands have incompatible shapes; the message carries both shapes."""


class ContractError(MmdialError):
    """A caller violated an operation's precondition."""


class ConfigError(MmdialError):
    """A configuration value is out of its allowed range."""


class DataError(MmdialError):
    """Corpus content is malformed or out of bounds."""


class NumericsError(MmdialError):
    """A numeric operation produced NaN/Inf or received a non-finite input."""
