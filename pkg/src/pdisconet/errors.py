"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class NumericDomainError(ArithmeticError):
    """A value lies outside the domain where an operation (or its gradient) is defined."""


class GraphError(RuntimeError):
    """Misuse of the computation graph, e.g. a second backward pass."""


class ConfigError(ValueError):
    """Invalid configuration value or configuration file."""


class PreconditionError(ValueError):
    """An argument violates an operation's precondition."""
