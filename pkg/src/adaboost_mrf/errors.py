"""Exception types shared across the package."""


class GraphStructureError(ValueError):
    """A graph or edge set violates a structural requirement."""


class CycleError(GraphStructureError):
    """An edge set contains a cycle."""


class DisconnectedError(GraphStructureError):
    """An edge set does not connect all nodes."""


class CapacityError(RuntimeError):
    """Problem size exceeds a guard limit for exact computation."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared where finite arithmetic is required."""


class DataError(ValueError):
    """A data or model file failed to parse or validate."""
