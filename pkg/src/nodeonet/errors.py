"""Exception hierarchy shared by all nodeonet modules."""


class NodeONetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(NodeONetError, ValueError):
    pass


class NonScalarLossError(NodeONetError, ValueError):
    pass


class NonFiniteError(NodeONetError, ArithmeticError):
    pass


class NotPositiveDefiniteError(NodeONetError, ArithmeticError):
    pass


class BadGridError(NodeONetError, ValueError):
    pass


class OutOfDomainError(NodeONetError, ValueError):
    pass


class InsufficientLevelsError(NodeONetError, ValueError):
    pass


class MissingInputError(NodeONetError, KeyError):
    pass


class GridMismatchError(NodeONetError, ValueError):
    pass


class TimeNotOnGridError(NodeONetError, ValueError):
    pass


class DegenerateLabelsError(NodeONetError, ValueError):
    pass


class ContainerFormatError(NodeONetError, ValueError):
    pass


class ConfigError(NodeONetError, ValueError):
    pass


class DivergedError(NodeONetError, ArithmeticError):
    """A numerical procedure blew up.

    ``step`` is the time step, epoch or sample index at which the blow-up was
    detected (whatever the raising routine iterates over).
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
