"""Exception hierarchy shared across the package."""


class DepthSimError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DepthSimError, ValueError):
    """Invalid sensor configuration, preset name, or run setup."""


class ContractError(DepthSimError, ValueError):
    """A caller violated an operation's precondition."""


class InputError(DepthSimError, ValueError):
    """Malformed user-provided data (images, scene files, pairs)."""


class NumericalError(DepthSimError, ArithmeticError):
    """Non-finite values appeared during evaluation or differentiation."""
