"""
Exception hierarchy for the H²-matrix direct solver.

Library functions raise these; the CLI maps them onto exit codes
(input errors → 2, numerical failures → 3).
"""

from typing import Optional


class H2SolverError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(H2SolverError, ValueError):
    """Bad arguments, malformed files or mismatched dimensions."""


class DenseGuardError(InvalidInputError):
    """A dense oracle was asked to work on a matrix larger than the guard allows."""

    def __init__(self, n: int, guard: int):
        self.n = n
        self.guard = guard
        super().__init__(f"Dense computation refused: N={n} exceeds the dense guard of {guard}")


class NumericalError(H2SolverError, ArithmeticError):
    """A numerical step could not be completed."""


class NotOrthonormalError(NumericalError):
    """A basis handed to a routine that requires orthonormal columns is not orthonormal."""


class SingularPivotError(NumericalError):
    """
    A pivot of the unpivoted partial LU fell below the pivot tolerance.

    Attributes:
        cluster: Cluster whose diagonal block was being factored (None for a bare call)
        level: Tree level of that cluster (None for a bare call)
        index: Position of the offending pivot inside the block
        pivot: Absolute value of the pivot
        threshold: Threshold the pivot was compared against
    """

    def __init__(
        self,
        index: int,
        pivot: float,
        threshold: float,
        cluster: Optional[int] = None,
        level: Optional[int] = None,
    ):
        self.index = index
        self.pivot = pivot
        self.threshold = threshold
        self.cluster = cluster
        self.level = level
        super().__init__(self._message())

    def _message(self) -> str:
        where = ""
        if self.cluster is not None:
            where = f" in cluster {self.cluster} at level {self.level}"
        return (
            f"Singular pivot{where}: |pivot[{self.index}]| = {self.pivot:.3e} "
            f"below threshold {self.threshold:.3e}"
        )
