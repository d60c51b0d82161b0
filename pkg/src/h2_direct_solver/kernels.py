"""
Kernel definitions: the entry generator Z[m, n] = K(x_m, x_n).

Built-in kernels:
    laplace:    1 / (4 pi r)
    helmholtz:  exp(-j k r) / (4 pi r)
    custom:     any callable f(targets, sources) -> (m, n) matrix

Self-interaction entries of the singular built-in kernels are defined by the
diagonal shift alone; for custom kernels the shift is added to f(x_m, x_m).
With `scale_diagonal` the shift is multiplied by the largest off-diagonal
absolute row sum of the kernel matrix, which makes the matrix diagonally
dominant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Union

import numpy as np

from .errors import InvalidInputError

# Set up logging
logger = logging.getLogger(__name__)

KERNEL_KINDS = ("laplace", "helmholtz", "custom")

# Rows per chunk when a kernel is swept over a full row range
ROW_CHUNK_ENTRIES = 2_000_000

KernelFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]
Index = Union[slice, np.ndarray]


@dataclass(frozen=True)
class KernelSpec:
    """
    Definition of the matrix entries.

    Attributes:
        kind: "laplace", "helmholtz" or "custom"
        wavenumber: Complex wavenumber k (helmholtz only)
        diagonal_shift: Value placed on (or added to) self-interaction entries
        scale_diagonal: Multiply the shift by the largest off-diagonal absolute row sum
        function: Entry generator for custom kernels
        symmetric: Whether K(x, y) == K(y, x); symmetric kernels sample only one side
    """

    kind: str = "laplace"
    wavenumber: complex = 0.0
    diagonal_shift: float = 1.0
    scale_diagonal: bool = False
    function: Optional[KernelFunction] = None
    symmetric: bool = True

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidInputError(f"Unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}")
        if self.kind == "custom" and self.function is None:
            raise InvalidInputError("Custom kernels need an entry function")
        if not np.isfinite(complex(self.wavenumber)):
            raise InvalidInputError(f"Wavenumber must be finite, got {self.wavenumber}")
        if not math.isfinite(self.diagonal_shift):
            raise InvalidInputError(f"Diagonal shift must be finite, got {self.diagonal_shift}")

    @classmethod
    def laplace(cls, diagonal_shift: float = 1.0, scale_diagonal: bool = False) -> "KernelSpec":
        return cls("laplace", 0.0, diagonal_shift, scale_diagonal)

    @classmethod
    def helmholtz(cls, wavenumber: complex, diagonal_shift: float = 1.0, scale_diagonal: bool = True) -> "KernelSpec":
        return cls("helmholtz", wavenumber, diagonal_shift, scale_diagonal)

    @classmethod
    def custom(
        cls,
        function: KernelFunction,
        diagonal_shift: float = 0.0,
        symmetric: bool = True,
        scale_diagonal: bool = False,
    ) -> "KernelSpec":
        return cls("custom", 0.0, diagonal_shift, scale_diagonal, function, symmetric)

    def evaluate(self, targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
        """
        Raw kernel values between two point sets, self-interactions not yet fixed up.

        Args:
            targets: (m, 3) coordinates
            sources: (n, 3) coordinates

        Returns:
            Complex (m, n) matrix
        """
        if self.kind == "custom":
            values = np.asarray(self.function(targets, sources), dtype=np.complex128)
            if values.shape != (targets.shape[0], sources.shape[0]):
                raise InvalidInputError(
                    f"Custom kernel returned shape {values.shape}, expected {(targets.shape[0], sources.shape[0])}"
                )
            return values

        diff = targets[:, None, :] - sources[None, :, :]
        r = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "laplace":
                return (1.0 / (4.0 * np.pi * r)).astype(np.complex128)
            return np.exp(-1j * self.wavenumber * r) / (4.0 * np.pi * r)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly description; custom kernels are not serializable."""
        if self.kind == "custom":
            raise InvalidInputError("Custom kernels cannot be serialized")
        k = complex(self.wavenumber)
        return {
            "kind": self.kind,
            "wavenumber": [k.real, k.imag],
            "diagonal_shift": self.diagonal_shift,
            "scale_diagonal": self.scale_diagonal,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KernelSpec":
        re, im = data.get("wavenumber", [0.0, 0.0])
        return cls(
            kind=data["kind"],
            wavenumber=complex(re, im),
            diagonal_shift=float(data.get("diagonal_shift", 1.0)),
            scale_diagonal=bool(data.get("scale_diagonal", False)),
        )


def _as_indices(index: Index, n: int) -> np.ndarray:
    if isinstance(index, slice):
        return np.arange(n)[index]
    return np.asarray(index, dtype=np.int64)


def kernel_block(
    kernel: KernelSpec,
    points: np.ndarray,
    rows: Index,
    cols: Index,
    diagonal: float,
) -> np.ndarray:
    """
    Matrix block Z[rows, cols] over an ordered point array.

    Entries where the row and column index coincide are self-interactions and
    get the resolved diagonal value.

    Args:
        kernel: Kernel definition
        points: (N, 3) coordinates, in the ordering the indices refer to
        rows: Row indices (slice or integer array)
        cols: Column indices (slice or integer array)
        diagonal: Resolved diagonal value (see resolve_diagonal)

    Returns:
        Complex matrix of shape (len(rows), len(cols))
    """
    n = points.shape[0]
    ri = _as_indices(rows, n)
    ci = _as_indices(cols, n)
    Z = kernel.evaluate(points[ri], points[ci])
    _, ia, ib = np.intersect1d(ri, ci, assume_unique=True, return_indices=True)
    if ia.size:
        if kernel.kind == "custom":
            Z[ia, ib] += diagonal
        else:
            Z[ia, ib] = diagonal
    return Z


def row_chunks(n_rows: int, n_cols: int):
    step = max(1, ROW_CHUNK_ENTRIES // max(n_cols, 1))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def resolve_diagonal(kernel: KernelSpec, points: np.ndarray) -> float:
    """
    Diagonal value for a kernel on a point set.

    Without scaling this is the shift itself. With scaling it is the shift
    times the largest off-diagonal absolute row sum.
    """
    if not kernel.scale_diagonal:
        return float(kernel.diagonal_shift)

    n = points.shape[0]
    best = 0.0
    for start, stop in row_chunks(n, n):
        block = np.abs(kernel_block(kernel, points, slice(start, stop), slice(0, n), 0.0))
        idx = np.arange(start, stop)
        block[idx - start, idx] = 0.0
        if not np.all(np.isfinite(block)):
            raise InvalidInputError("Kernel produced non-finite entries (coincident points?)")
        best = max(best, float(block.sum(axis=1).max()))
    value = float(kernel.diagonal_shift) * best
    logger.info(f"Scaled diagonal: shift {kernel.diagonal_shift} x row sum {best:.4e} = {value:.4e}")
    return value
