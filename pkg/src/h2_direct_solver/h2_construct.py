"""
Algebraic construction of H²-matrices with nested orthonormal cluster bases.

Admissible blocks are stored as

    Z[t, s] ~= V_t @ S_ts @ V_s.T

where V_t is the (nested) cluster basis of t. Leaf clusters store V_t
directly; a non-leaf cluster t with children c1, c2 stores a transfer matrix
T_t and V_t = blockdiag(V_c1, V_c2) @ T_t. Inadmissible leaf pairs are kept
as dense blocks.

Construction is bottom-up. The far field of a cluster is every admissible
partner of the cluster and of its ancestors. Each column block of the
far-field sample is scaled to unit Frobenius norm. Nested projections add
their squared errors over the levels a basis spans, and a block is projected
on both sides, so every compression truncates at

    eps_h2 / (2 sqrt(L + 1))

which keeps the relative Frobenius error of every admissible block at or
below eps_h2.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dense_kernels import truncated_svd
from .errors import DenseGuardError, InvalidInputError
from .geometry_tree import BlockClusterTree, Cluster, ClusterTree, PointCloud
from .kernels import KernelSpec, kernel_block, resolve_diagonal, row_chunks

# Set up logging
logger = logging.getLogger(__name__)

DENSE_GUARD = 20_000

Block = Tuple[int, int]


@dataclass
class ClusterBasis:
    """
    Basis data owned by one cluster.

    Attributes:
        owner: Cluster id
        matrix: V (#t x k) for a leaf, transfer matrix T ((k_c1 + k_c2) x k) otherwise
        is_leaf: Whether `matrix` is a leaf basis
    """

    owner: int
    matrix: np.ndarray
    is_leaf: bool

    @property
    def rank(self) -> int:
        return self.matrix.shape[1]


@dataclass
class CouplingMatrix:
    """Coupling matrix S of the admissible block (t, s)."""

    block: Block
    S: np.ndarray


@dataclass
class H2Matrix:
    """
    H²-matrix over a cluster tree and its block partition.

    All row and column indices refer to the tree ordering of the points.
    """

    tree: ClusterTree
    blocks: BlockClusterTree
    bases: Dict[int, ClusterBasis]
    couplings: Dict[Block, CouplingMatrix]
    dense_blocks: Dict[Block, np.ndarray]
    eps_h2: float
    diagonal: float
    kernel: Optional[KernelSpec] = None
    real_bases: bool = True
    meta: Dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def depth(self) -> int:
        return self.tree.depth

    def rank(self, t: int) -> int:
        return self.bases[t].rank

    def rank_table(self) -> np.ndarray:
        """Rank of every cluster, indexed by cluster id."""
        return np.array([self.bases[c.id].rank for c in self.tree.clusters], dtype=np.int64)

    def max_rank_per_level(self) -> List[int]:
        return [max((self.rank(t) for t in ids), default=0) for ids in self.tree.levels]

    @property
    def nbytes(self) -> int:
        total = sum(b.matrix.nbytes for b in self.bases.values())
        total += sum(c.S.nbytes for c in self.couplings.values())
        total += sum(d.nbytes for d in self.dense_blocks.values())
        return int(total)

    def copy(self) -> "H2Matrix":
        """Working copy: arrays are duplicated, the (immutable) trees are shared."""
        return H2Matrix(
            tree=self.tree,
            blocks=self.blocks,
            bases={t: ClusterBasis(b.owner, b.matrix.copy(), b.is_leaf) for t, b in self.bases.items()},
            couplings={k: CouplingMatrix(c.block, c.S.copy()) for k, c in self.couplings.items()},
            dense_blocks={k: d.copy() for k, d in self.dense_blocks.items()},
            eps_h2=self.eps_h2,
            diagonal=self.diagonal,
            kernel=self.kernel,
            real_bases=self.real_bases,
            meta=copy.deepcopy(self.meta),
        )


def assemble_dense(
    kernel: KernelSpec,
    pc: PointCloud,
    tree: Optional[ClusterTree] = None,
    guard: int = DENSE_GUARD,
) -> np.ndarray:
    """
    Dense kernel matrix, used as an oracle.

    Args:
        kernel: Kernel definition
        pc: Point cloud
        tree: If given, rows and columns follow the tree ordering (global_perm applied)
        guard: Largest N for which a dense matrix is built

    Returns:
        Complex N x N matrix

    Raises:
        DenseGuardError: If N exceeds the guard
    """
    n = pc.n
    if n > guard:
        raise DenseGuardError(n, guard)
    points = tree.tree_points() if tree is not None else pc.points
    diagonal = resolve_diagonal(kernel, points)
    Z = kernel_block(kernel, points, slice(0, n), slice(0, n), diagonal)
    if not np.all(np.isfinite(Z)):
        raise InvalidInputError("Kernel produced non-finite entries (coincident points?)")
    return Z


def _realify(M: np.ndarray) -> np.ndarray:
    if not np.any(M.imag):
        return np.ascontiguousarray(M.real)
    return np.hstack([M.real, M.imag])


def block_truncation_tol(eps_h2: float, depth: int) -> float:
    """Frobenius tail allowed per compression for a per-block error of eps_h2."""
    return eps_h2 / (2.0 * np.sqrt(depth + 1))


class _BasisBuilder:
    """Bottom-up construction of leaf bases and transfer matrices."""

    def __init__(
        self,
        kernel: KernelSpec,
        tree: ClusterTree,
        blocks: BlockClusterTree,
        points: np.ndarray,
        diagonal: float,
        eps_h2: float,
        real_bases: bool,
    ):
        self.kernel = kernel
        self.tree = tree
        self.points = points
        self.diagonal = diagonal
        self.eps_h2 = eps_h2
        self.tol = block_truncation_tol(eps_h2, tree.depth)
        self.real_bases = real_bases
        self.bases: Dict[int, ClusterBasis] = {}

        partners: Dict[int, List[int]] = {c.id: [] for c in tree.clusters}
        for t, s, _ in blocks.admissible:
            partners[t].append(s)

        # Far-field partners of a cluster include those of all its ancestors
        self.far_partners: Dict[int, List[int]] = {}
        for ids in tree.levels:
            for t in ids:
                parent = tree.clusters[t].parent
                inherited = self.far_partners[parent] if parent is not None else []
                merged = inherited + partners[t]
                self.far_partners[t] = sorted(merged, key=lambda s: tree.clusters[s].start)

    def run(self) -> Dict[int, ClusterBasis]:
        self._build(self.tree.root)
        return self.bases

    def _far_indices(self, t: int) -> np.ndarray:
        ranges = [np.arange(self.tree.clusters[s].start, self.tree.clusters[s].stop) for s in self.far_partners[t]]
        return np.concatenate(ranges) if ranges else np.zeros(0, dtype=np.int64)

    def _compress(self, sample: np.ndarray, colnorm: np.ndarray) -> np.ndarray:
        weights = np.divide(1.0, colnorm, out=np.zeros_like(colnorm), where=colnorm > 0)
        M = sample * weights
        if self.real_bases:
            M = _realify(M)
        return truncated_svd(M, self.tol, mode="frobenius").U.astype(np.complex128)

    def _leaf_sample(self, c: Cluster) -> Tuple[np.ndarray, np.ndarray]:
        rows = slice(c.start, c.stop)
        row_parts, col_parts, norms = [], [], []
        for s_id in self.far_partners[c.id]:
            s = self.tree.clusters[s_id]
            cols = slice(s.start, s.stop)
            Z = kernel_block(self.kernel, self.points, rows, cols, self.diagonal)
            row_parts.append(Z)
            norms.append(np.full(s.size, np.linalg.norm(Z)))
            if not self.kernel.symmetric:
                col_parts.append(kernel_block(self.kernel, self.points, cols, rows, self.diagonal).T)

        if not row_parts:
            return np.zeros((c.size, 0), dtype=np.complex128), np.zeros(0)

        sample = np.hstack(row_parts + col_parts)
        colnorm = np.concatenate(norms)
        if not self.kernel.symmetric:
            col_norms = [np.full(p.shape[1], np.linalg.norm(p)) for p in col_parts]
            colnorm = np.concatenate([colnorm] + col_norms)
        if not np.all(np.isfinite(sample)):
            raise InvalidInputError(f"Kernel produced non-finite entries in the far field of cluster {c.id}")
        return sample, colnorm

    def _build(self, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return the projected far-field sample of t, its column indices and column-block norms."""
        c = self.tree.clusters[t]
        far_idx = self._far_indices(t)

        if c.is_leaf:
            sample, colnorm = self._leaf_sample(c)
            V = self._compress(sample, colnorm)
            self.bases[t] = ClusterBasis(t, V, True)
            logger.debug(f"Leaf {t}: #t={c.size}, far columns={far_idx.size}, rank={V.shape[1]}")
            return V.conj().T @ sample, far_idx, colnorm

        pieces = []
        norms_sq = np.zeros(far_idx.size * (1 if self.kernel.symmetric else 2))
        for child in c.children:
            W, child_idx, child_norm = self._build(child)
            pos = np.searchsorted(child_idx, far_idx)
            if not self.kernel.symmetric:
                pos = np.concatenate([pos, pos + child_idx.size])
            pieces.append(W[:, pos])
            norms_sq += child_norm[pos] ** 2
        stacked = np.vstack(pieces)
        colnorm = np.sqrt(norms_sq)
        T = self._compress(stacked, colnorm)
        self.bases[t] = ClusterBasis(t, T, False)
        logger.debug(f"Cluster {t}: level {c.level}, far columns={far_idx.size}, rank={T.shape[1]}")
        return T.conj().T @ stacked, far_idx, colnorm


def expand_all_bases(tree: ClusterTree, bases: Dict[int, ClusterBasis]) -> Dict[int, np.ndarray]:
    """Expanded bases V_t (#t x k_t) for every cluster, built bottom-up."""
    expanded: Dict[int, np.ndarray] = {}
    for l in range(tree.depth, -1, -1):
        for t in tree.levels[l]:
            b = bases[t]
            if b.is_leaf:
                expanded[t] = b.matrix
            else:
                c1, c2 = tree.clusters[t].children
                k1 = bases[c1].rank
                expanded[t] = np.vstack([expanded[c1] @ b.matrix[:k1], expanded[c2] @ b.matrix[k1:]])
    return expanded


def expanded_basis(A: H2Matrix, t: int) -> np.ndarray:
    """
    Nested expansion of the basis of cluster t.

    Args:
        A: H²-matrix
        t: Cluster id

    Returns:
        V_t of shape (#t, k_t)
    """
    b = A.bases[t]
    if b.is_leaf:
        return b.matrix
    c1, c2 = A.tree.clusters[t].children
    k1 = A.bases[c1].rank
    return np.vstack([expanded_basis(A, c1) @ b.matrix[:k1], expanded_basis(A, c2) @ b.matrix[k1:]])


def _project_block(
    kernel: KernelSpec,
    points: np.ndarray,
    t: Cluster,
    s: Cluster,
    Vt: np.ndarray,
    Vs: np.ndarray,
    diagonal: float,
) -> np.ndarray:
    """S = V_t^H Z_ts conj(V_s), assembled in row chunks."""
    S = np.zeros((Vt.shape[1], Vs.shape[1]), dtype=np.complex128)
    if S.size == 0:
        return S
    Vs_conj = Vs.conj()
    for a, b in row_chunks(t.size, s.size):
        Z = kernel_block(kernel, points, slice(t.start + a, t.start + b), slice(s.start, s.stop), diagonal)
        if not np.all(np.isfinite(Z)):
            raise InvalidInputError(f"Kernel produced non-finite entries in block ({t.id}, {s.id})")
        S += Vt[a:b].conj().T @ (Z @ Vs_conj)
    return S


def build_h2(
    kernel: KernelSpec,
    tree: ClusterTree,
    blocks: BlockClusterTree,
    eps_h2: float,
    real_bases: bool = True,
) -> H2Matrix:
    """
    Build the H²-matrix approximation of a kernel matrix.

    Args:
        kernel: Kernel definition
        tree: Cluster tree
        blocks: Block cluster tree on `tree`
        eps_h2: Construction accuracy (> 0)
        real_bases: Compute real-valued bases from the real and imaginary parts of the far field

    Returns:
        H2Matrix with orthonormal nested bases

    Raises:
        InvalidInputError: For eps_h2 <= 0 or non-finite kernel entries
    """
    if not eps_h2 > 0:
        raise InvalidInputError(f"eps_h2 must be > 0, got {eps_h2}")

    points = tree.tree_points()
    diagonal = resolve_diagonal(kernel, points)

    bases = _BasisBuilder(kernel, tree, blocks, points, diagonal, eps_h2, real_bases).run()
    expanded = expand_all_bases(tree, bases)

    couplings: Dict[Block, CouplingMatrix] = {}
    for t, s, _ in blocks.admissible:
        S = _project_block(kernel, points, tree.clusters[t], tree.clusters[s], expanded[t], expanded[s], diagonal)
        couplings[(t, s)] = CouplingMatrix((t, s), S)

    dense: Dict[Block, np.ndarray] = {}
    for t, s in blocks.inadmissible:
        ct, cs = tree.clusters[t], tree.clusters[s]
        D = kernel_block(kernel, points, slice(ct.start, ct.stop), slice(cs.start, cs.stop), diagonal)
        if not np.all(np.isfinite(D)):
            raise InvalidInputError(f"Kernel produced non-finite entries in dense block ({t}, {s})")
        dense[(t, s)] = D

    A = H2Matrix(tree, blocks, bases, couplings, dense, eps_h2, diagonal, kernel, real_bases)
    logger.info(
        f"H² matrix: N={A.n}, eps_h2={eps_h2:.1e}, max rank per level {A.max_rank_per_level()}, "
        f"{A.nbytes / 2**20:.2f} MiB"
    )
    return A


def reconstruct_block(A: H2Matrix, t: int, s: int) -> np.ndarray:
    """
    Materialize the admissible block V_t S_ts V_s^T.

    Raises:
        InvalidInputError: If (t, s) is not an admissible block of A
    """
    coupling = A.couplings.get((t, s))
    if coupling is None:
        raise InvalidInputError(f"Block ({t}, {s}) is not admissible")
    return expanded_basis(A, t) @ coupling.S @ expanded_basis(A, s).T


def h2_to_dense(A: H2Matrix, guard: int = DENSE_GUARD) -> np.ndarray:
    """Dense matrix represented by the H²-matrix (tree ordering)."""
    if A.n > guard:
        raise DenseGuardError(A.n, guard)
    expanded = expand_all_bases(A.tree, A.bases)
    Z = np.zeros((A.n, A.n), dtype=np.complex128)
    for (t, s), coupling in A.couplings.items():
        ct, cs = A.tree.clusters[t], A.tree.clusters[s]
        Z[ct.start:ct.stop, cs.start:cs.stop] = expanded[t] @ coupling.S @ expanded[s].T
    for (t, s), D in A.dense_blocks.items():
        ct, cs = A.tree.clusters[t], A.tree.clusters[s]
        Z[ct.start:ct.stop, cs.start:cs.stop] = D
    return Z


def h2_matvec(A: H2Matrix, x: np.ndarray) -> np.ndarray:
    """
    Matrix-vector product y = Z_H2 x.

    Upward pass through the transfer matrices, coupling multiplication,
    downward pass, plus the dense near-field blocks.

    Args:
        A: H²-matrix
        x: Vector of length N (tree ordering), or an N x r matrix

    Returns:
        y with the shape of x
    """
    x = np.asarray(x)
    if x.shape[0] != A.n or x.ndim > 2:
        raise InvalidInputError(f"Dimension mismatch: H² matrix has N={A.n}, vector has shape {x.shape}")
    X = x.reshape(A.n, -1).astype(np.complex128)
    Y = np.zeros_like(X)
    tree = A.tree

    xhat: Dict[int, np.ndarray] = {}
    for l in range(tree.depth, -1, -1):
        for t in tree.levels[l]:
            c = tree.clusters[t]
            M = A.bases[t].matrix
            if c.is_leaf:
                xhat[t] = M.T @ X[c.start:c.stop]
            else:
                c1, c2 = c.children
                xhat[t] = M.T @ np.vstack([xhat[c1], xhat[c2]])

    yhat = {t: np.zeros((A.rank(t), X.shape[1]), dtype=np.complex128) for t in xhat}
    for (t, s), coupling in A.couplings.items():
        yhat[t] += coupling.S @ xhat[s]

    for l in range(tree.depth + 1):
        for t in tree.levels[l]:
            c = tree.clusters[t]
            M = A.bases[t].matrix
            if c.is_leaf:
                Y[c.start:c.stop] += M @ yhat[t]
            else:
                c1, c2 = c.children
                z = M @ yhat[t]
                k1 = A.rank(c1)
                yhat[c1] += z[:k1]
                yhat[c2] += z[k1:]

    for (t, s), D in A.dense_blocks.items():
        ct, cs = tree.clusters[t], tree.clusters[s]
        Y[ct.start:ct.stop] += D @ X[cs.start:cs.stop]

    return Y.reshape(x.shape) if x.ndim == 1 else Y
