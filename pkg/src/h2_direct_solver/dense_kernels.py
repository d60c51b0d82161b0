"""
Dense numerical primitives used by construction, factorization and solve.

All routines work on small blocks (a cluster's worth of unknowns, or twice a
cluster rank) and never pivot across blocks, with the exception of
dense_lu, which factors the final root remainder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla

from .errors import InvalidInputError, NotOrthonormalError, SingularPivotError

# Set up logging
logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-13
ABSOLUTE_FLOOR = 1e-300
ORTHONORMALITY_TOL = 1e-10


@dataclass(frozen=True)
class TruncatedSVD:
    """
    Leading singular (or eigen-) vectors of a matrix after truncation.

    Attributes:
        U: Retained vectors, orthonormal columns
        sigma: All singular values (or clipped eigenvalues), descending
        rank: Number of retained columns of U
        eps: Relative tolerance the truncation used
    """

    U: np.ndarray
    sigma: np.ndarray
    rank: int
    eps: float


def _check_finite(A: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{what} contains non-finite entries")


def _truncation_rank(sigma: np.ndarray, eps: float, scale: Optional[float] = None) -> int:
    """Smallest r such that every sigma[r:] <= eps * reference."""
    if sigma.size == 0:
        return 0
    reference = sigma[0] if scale is None else max(sigma[0], scale)
    threshold = max(eps * reference, ABSOLUTE_FLOOR)
    return int(np.count_nonzero(sigma > threshold))


def _frobenius_tail_rank(sigma: np.ndarray, tol: float) -> int:
    """Smallest r such that sqrt(sum(sigma[r:]**2)) <= tol."""
    if sigma.size == 0 or sigma[0] <= ABSOLUTE_FLOOR:
        return 0
    # tails[r] = ||sigma[r:]||_2
    tails = np.sqrt(np.cumsum((sigma ** 2)[::-1])[::-1])
    above = np.flatnonzero(tails > max(tol, ABSOLUTE_FLOOR))
    return int(above[-1] + 1) if above.size else 0


def truncated_svd(A: np.ndarray, eps: float, mode: str = "relative") -> TruncatedSVD:
    """
    Truncated left singular vectors of A.

    Args:
        A: Matrix whose column space is compressed (any shape)
        eps: Truncation tolerance
        mode: "relative" keeps singular values above eps * sigma_0;
            "frobenius" keeps the fewest vectors whose discarded tail has
            Frobenius norm at most eps

    Returns:
        TruncatedSVD with U of shape (A.shape[0], rank)
    """
    A = np.asarray(A)
    m = A.shape[0]
    if A.size == 0:
        return TruncatedSVD(np.zeros((m, 0), dtype=A.dtype), np.zeros(0), 0, eps)
    _check_finite(A, "SVD input")

    try:
        U, s, _ = sla.svd(A, full_matrices=False, check_finite=False)
    except np.linalg.LinAlgError:
        logger.warning("gesdd did not converge; retrying with gesvd")
        U, s, _ = sla.svd(A, full_matrices=False, check_finite=False, lapack_driver="gesvd")

    if mode == "relative":
        rank = _truncation_rank(s, eps)
    elif mode == "frobenius":
        rank = _frobenius_tail_rank(s, eps)
    else:
        raise InvalidInputError(f"Unknown truncation mode '{mode}'")
    return TruncatedSVD(U[:, :rank], s, rank, eps)


def truncated_eig_psd(G: np.ndarray, eps: float, scale: Optional[float] = None) -> TruncatedSVD:
    """
    Truncated eigendecomposition of a Hermitian positive-semidefinite matrix.

    The input is symmetrized first. Eigenvalues are clipped at zero and sorted
    descending; the retained eigenvectors are those whose eigenvalue exceeds
    eps times the reference value, where the reference is the largest
    eigenvalue of G (or `scale`, if that is larger). An absolute floor of
    1e-300 makes G = 0 come out with rank 0.

    Args:
        G: Hermitian PSD matrix (n x n)
        eps: Relative tolerance on eigenvalues
        scale: Optional external reference magnitude

    Returns:
        TruncatedSVD holding the retained eigenvectors in U
    """
    G = np.asarray(G)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidInputError(f"truncated_eig_psd expects a square matrix, got shape {G.shape}")
    n = G.shape[0]
    if n == 0:
        return TruncatedSVD(np.zeros((0, 0), dtype=G.dtype), np.zeros(0), 0, eps)
    _check_finite(G, "Eigenvalue input")

    G = 0.5 * (G + G.conj().T)
    w, X = sla.eigh(G, check_finite=False)
    w = np.clip(w[::-1], 0.0, None)
    X = X[:, ::-1]

    rank = _truncation_rank(w, eps, scale)
    return TruncatedSVD(np.ascontiguousarray(X[:, :rank]), w, rank, eps)


def orthonormality_error(V: np.ndarray) -> float:
    """Frobenius distance of V^H V from the identity."""
    k = V.shape[1]
    if k == 0:
        return 0.0
    return float(np.linalg.norm(V.conj().T @ V - np.eye(k)))


def _is_real_valued(A: np.ndarray) -> bool:
    return not np.iscomplexobj(A) or not np.any(A.imag)


def unitary_completion(V: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> np.ndarray:
    """
    Orthonormal complement of the column space of V.

    Args:
        V: Matrix with orthonormal columns (n x k)
        tol: Allowed Frobenius deviation of V^H V from the identity

    Returns:
        V_perp of shape (n, n - k) such that [V_perp V] is unitary

    Raises:
        NotOrthonormalError: If V^H V is not the identity within tol
    """
    V = np.asarray(V)
    n, k = V.shape
    error = orthonormality_error(V)
    if error > tol:
        raise NotOrthonormalError(f"Basis is not orthonormal: ||V^H V - I||_F = {error:.3e} > {tol:.1e}")
    if k == 0:
        return np.eye(n, dtype=V.dtype)
    if k == n:
        return np.zeros((n, 0), dtype=V.dtype)

    # Real-valued bases get a real completion
    if _is_real_valued(V):
        Q, _ = sla.qr(np.real(V), mode="full", check_finite=False)
        return Q[:, k:].astype(V.dtype)
    Q, _ = sla.qr(V, mode="full", check_finite=False)
    return Q[:, k:]


def partial_lu(
    F: np.ndarray,
    pivot_tol: float = PIVOT_TOL,
    cluster: Optional[int] = None,
    level: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    LU factorization without row exchanges.

    Args:
        F: Square matrix
        pivot_tol: Relative pivot tolerance; a pivot below pivot_tol * max|F| is an error
        cluster: Cluster id reported in the error, if any
        level: Tree level reported in the error, if any

    Returns:
        Tuple (L, U) with L unit lower triangular, U upper triangular, F = L U

    Raises:
        SingularPivotError: If a pivot is too small
    """
    F = np.asarray(F)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise InvalidInputError(f"partial_lu expects a square matrix, got shape {F.shape}")
    n = F.shape[0]
    dtype = np.result_type(F.dtype, np.float64)
    if n == 0:
        return np.zeros((0, 0), dtype=dtype), np.zeros((0, 0), dtype=dtype)

    A = F.astype(dtype, copy=True)
    threshold = pivot_tol * float(np.max(np.abs(A)))
    for j in range(n):
        pivot = A[j, j]
        if pivot == 0 or abs(pivot) < threshold:
            raise SingularPivotError(j, float(abs(pivot)), threshold, cluster=cluster, level=level)
        A[j + 1:, j] /= pivot
        A[j + 1:, j + 1:] -= np.outer(A[j + 1:, j], A[j, j + 1:])

    L = np.tril(A, -1) + np.eye(n, dtype=dtype)
    U = np.triu(A)
    return L, U


def dense_lu(
    A: np.ndarray,
    pivot_tol: float = PIVOT_TOL,
    cluster: Optional[int] = None,
    level: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    LU factorization with partial pivoting, A[perm] = L U.

    Used for the final root remainder only.

    Returns:
        Tuple (perm, L, U)
    """
    A = np.asarray(A)
    n = A.shape[0]
    dtype = np.result_type(A.dtype, np.float64)
    if n == 0:
        empty = np.zeros((0, 0), dtype=dtype)
        return np.zeros(0, dtype=np.int64), empty, empty.copy()

    lu, piv = sla.lu_factor(A.astype(dtype), check_finite=False)
    threshold = pivot_tol * float(np.max(np.abs(A)))
    diag = np.abs(np.diag(lu))
    bad = np.flatnonzero((diag == 0) | (diag < threshold))
    if bad.size:
        j = int(bad[0])
        raise SingularPivotError(j, float(diag[j]), threshold, cluster=cluster, level=level)

    perm = np.arange(n)
    for i, p in enumerate(piv):
        perm[i], perm[p] = perm[p], perm[i]
    L = np.tril(lu, -1) + np.eye(n, dtype=dtype)
    U = np.triu(lu)
    return perm, L, U


def lower_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for unit lower triangular L."""
    if L.shape[0] == 0:
        return np.array(b, copy=True)
    return sla.solve_triangular(L, b, lower=True, unit_diagonal=True, check_finite=False)


def upper_solve(U: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve U x = b for upper triangular U."""
    if U.shape[0] == 0:
        return np.array(b, copy=True)
    return sla.solve_triangular(U, b, lower=False, check_finite=False)


def right_upper_solve(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Return X U^{-1} for upper triangular U."""
    if U.shape[0] == 0 or X.shape[0] == 0:
        return np.zeros((X.shape[0], U.shape[0]), dtype=np.result_type(X, U))
    return sla.solve_triangular(U, X.T, trans="T", lower=False, check_finite=False).T
