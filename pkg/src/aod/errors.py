"""Exception types shared across the package."""


class AODError(Exception):
    """Base class for every error raised by this package."""


class InvalidBoxError(AODError, ValueError):
    pass


class ShapeError(AODError, ValueError):
    pass


class ContractError(AODError, ValueError):
    """A caller violated an operation's precondition."""


class NumericalError(AODError, ArithmeticError):
    """Non-finite values appeared during a forward or backward pass."""


class DivergenceError(NumericalError):
    """Training produced non-finite activations or gradients."""


class DegenerateROIError(AODError, ValueError):
    pass


class ParseError(AODError, ValueError):
    pass


class SchemaVersionError(AODError, ValueError):
    pass


class ConfigError(AODError, ValueError):
    """Configuration validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
