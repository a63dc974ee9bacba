"""Exception hierarchy shared by every bmvc module."""


class BMvCError(Exception):
    """Base class for all errors raised by bmvc."""


class ShapeError(BMvCError, ValueError):
    """Operands have incompatible shapes for the named operation."""


class NonFiniteError(BMvCError, FloatingPointError):
    """An intermediate value became NaN or infinite."""


class RankDeficiencyError(BMvCError, ArithmeticError):
    """Thin QR met a (numerically) linearly dependent column.

    ``column`` is the zero-based index of the first offending column.
    """

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class GraphError(BMvCError, ValueError):
    """Invalid neighbour count, empty graph, or graph dimension mismatch."""


class DataError(BMvCError, ValueError):
    """Malformed dataset directory or file."""


class TrainingError(BMvCError, RuntimeError):
    """Training aborted (non-finite loss/gradient or exhausted QR retries)."""

