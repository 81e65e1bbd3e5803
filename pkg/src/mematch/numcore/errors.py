class ShapeError(ValueError):
    """Operands violate an op's shape contract."""


class DegenerateInputError(ValueError):
    """Input has no well-defined result (e.g. normalizing a zero vector)."""


class UninitializedStatsError(RuntimeError):
    """Batch norm asked for eval-mode statistics before any training pass."""


class GraphError(RuntimeError):
    """Misuse of the tape: non-scalar loss, detached graph, repeated backward."""
