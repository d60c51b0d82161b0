"""
Forward and backward substitution with a FactorChain.

All vectors are in tree ordering. A solve replays the chain on one working
vector: per cluster the segment is rotated by Q̃^H, the eliminated part is
solved with the small triangular factor and the neighbor segments are
updated; per level the permutation moves the retained unknowns to the front;
the root remainder is solved densely. The backward pass mirrors this in
reverse order.

The inverse factors are never formed; every step is a triangular solve or a
small block multiply.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dense_kernels import lower_solve, upper_solve
from .errors import InvalidInputError
from .factorization import FactorChain

# Set up logging
logger = logging.getLogger(__name__)


def _inverse_permute(v: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    out[perm] = v
    return out


@dataclass
class SolveWorkspace:
    """
    Working vector for one pass over a chain.

    Attributes:
        chain: Factorization being applied
        vector: N x r array, overwritten in place
    """

    chain: FactorChain
    vector: np.ndarray

    def __post_init__(self):
        if self.vector.ndim != 2 or self.vector.shape[0] != self.chain.n:
            raise InvalidInputError(
                f"Dimension mismatch: chain has N={self.chain.n}, vector has shape {self.vector.shape}"
            )

    def forward(self) -> None:
        """v <- 𝓛^{-1} v."""
        v = self.vector
        for lf in self.chain.levels:
            for rec in lf.records:
                lo, hi, e = rec.offset, rec.offset + rec.size, rec.eliminated_count
                v[lo:hi] = rec.qtilde.conj().T @ v[lo:hi]
                if e == 0:
                    continue
                y = lower_solve(rec.lower, v[lo:lo + e])
                v[lo:lo + e] = y
                for start, stop, block in rec.lower_blocks:
                    v[start:stop] -= block @ y
            n = lf.n_active
            v[:n] = v[:n][lf.permutation.perm]
        n = self.chain.n_root
        v[:n] = lower_solve(self.chain.root_lower, v[:n][self.chain.root_perm])

    def backward(self) -> None:
        """v <- 𝓤^{-1} v."""
        v = self.vector
        n = self.chain.n_root
        v[:n] = upper_solve(self.chain.root_upper, v[:n])
        for lf in reversed(self.chain.levels):
            n = lf.n_active
            v[:n] = _inverse_permute(v[:n], lf.permutation.perm)
            for rec in reversed(lf.records):
                lo, hi, e = rec.offset, rec.offset + rec.size, rec.eliminated_count
                if e:
                    z = v[lo:lo + e].copy()
                    for start, stop, block in rec.upper_blocks:
                        z -= block @ v[start:stop]
                    v[lo:lo + e] = upper_solve(rec.upper, z)
                v[lo:hi] = rec.qtilde.conj() @ v[lo:hi]

    def multiply_lower(self) -> None:
        """v <- 𝓛 v, the inverse of forward()."""
        v = self.vector
        n = self.chain.n_root
        v[:n] = _inverse_permute(self.chain.root_lower @ v[:n], self.chain.root_perm)
        for lf in reversed(self.chain.levels):
            n = lf.n_active
            v[:n] = _inverse_permute(v[:n], lf.permutation.perm)
            for rec in reversed(lf.records):
                lo, hi, e = rec.offset, rec.offset + rec.size, rec.eliminated_count
                if e:
                    y = v[lo:lo + e].copy()
                    for start, stop, block in rec.lower_blocks:
                        v[start:stop] += block @ y
                    v[lo:lo + e] = rec.lower @ y
                v[lo:hi] = rec.qtilde @ v[lo:hi]

    def multiply_upper(self) -> None:
        """v <- 𝓤 v, the inverse of backward()."""
        v = self.vector
        for lf in self.chain.levels:
            for rec in lf.records:
                lo, hi, e = rec.offset, rec.offset + rec.size, rec.eliminated_count
                v[lo:hi] = rec.qtilde.T @ v[lo:hi]
                if e:
                    z = rec.upper @ v[lo:lo + e]
                    for start, stop, block in rec.upper_blocks:
                        z += block @ v[start:stop]
                    v[lo:lo + e] = z
            n = lf.n_active
            v[:n] = v[:n][lf.permutation.perm]
        n = self.chain.n_root
        v[:n] = self.chain.root_upper @ v[:n]


def _workspace(chain: FactorChain, b: np.ndarray) -> SolveWorkspace:
    b = np.asarray(b)
    if b.ndim not in (1, 2) or b.shape[0] != chain.n:
        raise InvalidInputError(f"Dimension mismatch: chain has N={chain.n}, right-hand side has shape {b.shape}")
    return SolveWorkspace(chain, np.array(b, dtype=np.complex128).reshape(chain.n, -1))


def forward_substitute(chain: FactorChain, b: np.ndarray) -> np.ndarray:
    """
    Solve 𝓛 y = b.

    Args:
        chain: Factorization
        b: Right-hand side of length N (or N x r), tree ordering

    Returns:
        y with the shape of b
    """
    ws = _workspace(chain, b)
    ws.forward()
    return ws.vector.reshape(np.shape(b))


def backward_substitute(chain: FactorChain, y: np.ndarray) -> np.ndarray:
    """Solve 𝓤 x = y."""
    ws = _workspace(chain, y)
    ws.backward()
    return ws.vector.reshape(np.shape(y))


def apply_lower(chain: FactorChain, y: np.ndarray) -> np.ndarray:
    """Multiply by 𝓛."""
    ws = _workspace(chain, y)
    ws.multiply_lower()
    return ws.vector.reshape(np.shape(y))


def apply_upper(chain: FactorChain, x: np.ndarray) -> np.ndarray:
    """Multiply by 𝓤."""
    ws = _workspace(chain, x)
    ws.multiply_upper()
    return ws.vector.reshape(np.shape(x))


def solve(chain: FactorChain, b: np.ndarray, overwrite: bool = False) -> np.ndarray:
    """
    Solve Z x = b with a factored H²-matrix.

    Args:
        chain: Factorization of Z
        b: Right-hand side of length N, or an N x r matrix solved column by column
        overwrite: Write the solution into b, which must then be a writeable
            complex128 array; strided views are fine

    Returns:
        Solution with the shape of b (tree ordering); b itself with overwrite

    Raises:
        InvalidInputError: On a dimension mismatch, or with overwrite for an
            input that cannot hold the solution
    """
    arr = np.asarray(b)
    if arr.ndim not in (1, 2) or arr.shape[0] != chain.n:
        raise InvalidInputError(f"Dimension mismatch: chain has N={chain.n}, right-hand side has shape {arr.shape}")
    if overwrite and not (
        isinstance(b, np.ndarray) and b.dtype == np.complex128 and b.flags.writeable
    ):
        raise InvalidInputError(
            f"overwrite=True needs a writeable complex128 array, got {type(b).__name__} of dtype {arr.dtype}"
        )

    if arr.ndim == 2:
        out = b if overwrite else np.empty(arr.shape, dtype=np.complex128)
        for j in range(arr.shape[1]):
            out[:, j] = solve(chain, arr[:, j])
        return out

    # Strided input is solved on a contiguous copy and written back
    direct = overwrite and b.flags.c_contiguous
    work = b if direct else np.array(arr, dtype=np.complex128)
    ws = SolveWorkspace(chain, work.reshape(chain.n, 1))
    ws.forward()
    ws.backward()
    if overwrite and not direct:
        b[:] = work
        return b
    return work


def apply_inverse(chain: FactorChain, b: np.ndarray) -> np.ndarray:
    """Z^{-1} b through the explicit inverse form, identical to solve()."""
    return solve(chain, b)
