"""
Level-by-level direct factorization of an H²-matrix, Z = 𝓛 𝓤.

The factorization sweeps the cluster tree from the leaf level up to the
stop level (l0 by default). On every level each cluster is processed left to
right:

    step 0  fill-ins stored with the cluster's admissible blocks are merged
            into its basis (truncated at eps_fill_in)
    step 1  the basis is completed to a unitary matrix Q̃ = [V⊥  V]
    step 2  the near-field blocks in the cluster's row and column are
            transformed by Q̃; admissible blocks need no work because their
            first #i - k_i rows (and columns) are now zero
    step 3  the first #i - k_i unknowns are eliminated with an unpivoted
            partial LU; Schur-complement updates landing on near-field blocks
            are added in place, the others are kept in the fill-in ledger
            (admissible blocks of the level) or carried on a promoted block
            (pairs under a coarser admissible block)

After the level, the ledger is folded into the coupling matrices and the
retained (rank-sized) unknowns of sibling clusters are merged into their
parent. The remaining matrix at the stop level is factored densely.

Coordinates: every basis, ledger entry and transfer matrix of the active level
is expressed in the coordinates the level started with. Near-field blocks are
the only data transformed by Q̃.

Usage:
    chain = factorize(A, eps_fill_in=1e-5)
    x = solve(chain, b)
"""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Set, Tuple

import numpy as np
import scipy.linalg as sla

from .dense_kernels import (
    PIVOT_TOL,
    dense_lu,
    lower_solve,
    partial_lu,
    right_upper_solve,
    truncated_eig_psd,
    unitary_completion,
)
from .errors import InvalidInputError
from .h2_construct import H2Matrix

# Set up logging
logger = logging.getLogger(__name__)

Block = Tuple[int, int]

# Eigenvalues of the fill-in Gram matrix below this fraction of the largest
# one are indistinguishable from rounding noise
GRAM_FLOOR = 1e-14


class FillInLedger:
    """
    Fill-ins accumulated on the admissible blocks of the active level.

    Entries are dense matrices of size m_j x m_k in level-start coordinates.
    Repeated fill-ins on one block are summed.
    """

    def __init__(self):
        self._entries: Dict[Block, np.ndarray] = {}
        self._by_row: Dict[int, Set[Block]] = defaultdict(set)
        self._by_col: Dict[int, Set[Block]] = defaultdict(set)
        self.peak = 0

    def add(self, j: int, k: int, F: np.ndarray) -> None:
        key = (j, k)
        if key in self._entries:
            self._entries[key] += F
        else:
            self._entries[key] = np.array(F, dtype=np.complex128, copy=True)
            self._by_row[j].add(key)
            self._by_col[k].add(key)
            self.peak = max(self.peak, len(self._entries))

    def get(self, j: int, k: int) -> Optional[np.ndarray]:
        return self._entries.get((j, k))

    def row_entries(self, i: int) -> List[np.ndarray]:
        """Fill-ins on blocks (i, x)."""
        return [self._entries[key] for key in sorted(self._by_row.get(i, ()))]

    def col_entries(self, i: int) -> List[np.ndarray]:
        """Fill-ins on blocks (x, i)."""
        return [self._entries[key] for key in sorted(self._by_col.get(i, ()))]

    def items(self) -> Iterator[Tuple[Block, np.ndarray]]:
        return iter(sorted(self._entries.items()))

    def keys(self) -> List[Block]:
        return sorted(self._entries)

    def clear(self) -> None:
        self._entries.clear()
        self._by_row.clear()
        self._by_col.clear()
        self.peak = 0

    @property
    def nbytes(self) -> int:
        return sum(F.nbytes for F in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: Block) -> bool:
        return key in self._entries


@dataclass
class EliminationRecord:
    """
    Factors produced by processing one cluster.

    Offsets refer to the active vector of the record's level, in the
    coordinates current at the time the cluster was processed.

    Attributes:
        cluster: Cluster id
        level: Tree level
        offset: Start of the cluster's segment in the active vector
        size: Active size m_i of the cluster
        eliminated_count: Number of eliminated unknowns e_i = m_i - k_i
        qtilde: Unitary m_i x m_i matrix [V⊥  V]
        lower: Unit lower triangular e_i x e_i factor
        upper: Upper triangular e_i x e_i factor
        lower_blocks: (start, stop, block) with block = Z[rows, i'] U^{-1}
        upper_blocks: (start, stop, block) with block = L^{-1} Z[i', cols]
        rank_before: Basis rank before step 0
        rank_after: Basis rank after step 0
        fill_in_count: Number of (row, column) fill-in targets produced
    """

    cluster: int
    level: int
    offset: int
    size: int
    eliminated_count: int
    qtilde: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower_blocks: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    upper_blocks: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    rank_before: int = 0
    rank_after: int = 0
    fill_in_count: int = 0

    @property
    def nbytes(self) -> int:
        total = self.qtilde.nbytes + self.lower.nbytes + self.upper.nbytes
        total += sum(b.nbytes for _, _, b in self.lower_blocks)
        total += sum(b.nbytes for _, _, b in self.upper_blocks)
        return int(total)


@dataclass
class PermutationRecord:
    """
    Reordering applied to the active vector after a level.

    Retained unknowns move to the front (cluster by cluster, so siblings end
    up next to each other), eliminated unknowns to the back.
    """

    level: int
    perm: np.ndarray
    n_retained: int

    @property
    def n_active(self) -> int:
        return int(self.perm.size)


@dataclass
class LevelFactor:
    """Records of one processed level, in processing order, plus its permutation."""

    level: int
    records: List[EliminationRecord]
    permutation: PermutationRecord

    @property
    def n_active(self) -> int:
        return self.permutation.n_active

    @property
    def eliminated(self) -> int:
        return sum(r.eliminated_count for r in self.records)


@dataclass
class FactorChain:
    """
    Complete factorization Z = 𝓛 𝓤.

    Attributes:
        n: Matrix dimension N
        levels: Processed levels, leaf level first
        root_perm: Row permutation of the root remainder, R[root_perm] = L U
        root_lower: Unit lower triangular root factor
        root_upper: Upper triangular root factor
        stop_level: Last processed level (None if the matrix was factored densely)
        eps_fill_in: Fill-in truncation tolerance
        diagnostics: Per-level diagnostics, JSON-serializable
        peak_nbytes: Largest working-plus-chain storage seen during factorization
    """

    n: int
    levels: List[LevelFactor]
    root_perm: np.ndarray
    root_lower: np.ndarray
    root_upper: np.ndarray
    stop_level: Optional[int]
    eps_fill_in: float
    diagnostics: List[Dict[str, Any]] = field(default_factory=list)
    peak_nbytes: int = 0

    @property
    def n_root(self) -> int:
        return int(self.root_perm.size)

    @property
    def records(self) -> List[EliminationRecord]:
        return [r for lf in self.levels for r in lf.records]

    def arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Every array of the chain under its container name, in storage order."""
        for lf in self.levels:
            for rec in lf.records:
                prefix = f"chain/{lf.level}/{rec.cluster}"
                yield f"{prefix}/qtilde", rec.qtilde
                yield f"{prefix}/lower", rec.lower
                yield f"{prefix}/upper", rec.upper
                for n, (_, _, block) in enumerate(rec.lower_blocks):
                    yield f"{prefix}/lower_block/{n}", block
                for n, (_, _, block) in enumerate(rec.upper_blocks):
                    yield f"{prefix}/upper_block/{n}", block
            yield f"chain/{lf.level}/perm", lf.permutation.perm
        yield "chain/root_perm", self.root_perm
        yield "chain/root_lower", self.root_lower
        yield "chain/root_upper", self.root_upper

    @property
    def nbytes(self) -> int:
        return int(sum(a.nbytes for _, a in self.arrays()))


def _empty(shape: Tuple[int, int]) -> np.ndarray:
    return np.zeros(shape, dtype=np.complex128)


class WorkingMatrix:
    """
    Mutable working state of the factorization on one tree level.

    Holds a private copy of every array of the input H²-matrix; the input
    itself is never touched.
    """

    def __init__(self, A: H2Matrix, eps_fill_in: float, pivot_tol: float = PIVOT_TOL):
        if not 0 < eps_fill_in < 1:
            raise InvalidInputError(f"eps_fill_in must lie in (0, 1), got {eps_fill_in}")
        self.tree = A.tree
        self.blocks = A.blocks
        self.eps_fill_in = eps_fill_in
        self.pivot_tol = pivot_tol
        self.real_bases = A.real_bases

        self.couplings: Dict[Block, np.ndarray] = {k: c.S.copy() for k, c in A.couplings.items()}
        self.transfer: Dict[int, np.ndarray] = {
            t: b.matrix.copy() for t, b in A.bases.items() if not b.is_leaf
        }
        self.level = self.tree.depth
        self.basis: Dict[int, np.ndarray] = {t: A.bases[t].matrix.copy() for t in self.tree.leaves()}
        self.dense: Dict[Block, np.ndarray] = {k: D.astype(np.complex128) for k, D in A.dense_blocks.items()}
        self.virtual: Set[Block] = set()
        self.ledger = FillInLedger()
        # Fill-ins on pairs under a coarser admissible block, keyed by their promoted block
        self.carried = FillInLedger()
        self.in_place_fill_ins = 0
        self._setup_level()

    def _setup_level(self) -> None:
        ids = self.tree.levels[self.level]
        self.ids = list(ids)
        self.size = {i: self.basis[i].shape[0] for i in ids}
        self.offset: Dict[int, int] = {}
        pos = 0
        for i in ids:
            self.offset[i] = pos
            pos += self.size[i]
        self.n_active = pos
        # Rank the couplings and parent transfer matrices are currently sized for
        self.coupling_rank = {i: self.basis[i].shape[1] for i in ids}
        self.qtilde: Dict[int, np.ndarray] = {}
        self.eliminated: Dict[int, int] = {}
        self.admissible = set(self.blocks.admissible_at(self.level))
        self.row_nbrs: Dict[int, List[int]] = defaultdict(list)
        self.col_nbrs: Dict[int, List[int]] = defaultdict(list)
        for t, s in sorted(self.dense):
            self.row_nbrs[t].append(s)
            self.col_nbrs[s].append(t)
        self.in_place_fill_ins = 0

    @property
    def coupling_keys(self) -> List[Block]:
        """Admissible and promoted blocks of the active level."""
        return sorted(self.admissible | self.virtual)

    @property
    def nbytes(self) -> int:
        total = sum(B.nbytes for B in self.basis.values())
        total += sum(T.nbytes for T in self.transfer.values())
        total += sum(S.nbytes for S in self.couplings.values())
        total += sum(D.nbytes for D in self.dense.values())
        total += sum(Q.nbytes for Q in self.qtilde.values())
        return int(total + self.ledger.nbytes + self.carried.nbytes)

    def rank(self, i: int) -> int:
        return self.basis[i].shape[1]

    # ------------------------------------------------------------------
    # Per-cluster steps

    def step0_update_basis(self, i: int) -> int:
        """
        Merge the fill-ins of cluster i into its basis.

        Row fill-ins F_{i,x} enter through F F^H, column fill-ins F_{x,i}
        through F^T conj(F). Directions of the projected Gram matrix above
        eps_fill_in² (relative to the unprojected one) are appended.

        Returns:
            Number of columns added
        """
        B = self.basis[i]
        m, k = B.shape
        rows = self.ledger.row_entries(i) + self.carried.row_entries(i)
        cols = self.ledger.col_entries(i) + self.carried.col_entries(i)
        if (not rows and not cols) or k >= m:
            return 0

        H = np.zeros((m, m), dtype=np.complex128)
        for F in rows:
            H += F @ F.conj().T
        for F in cols:
            H += F.T @ F.conj()
        scale = float(np.linalg.norm(H, 2))
        if scale == 0.0:
            return 0

        P = np.eye(m) - B @ B.conj().T
        G = P @ H @ P.conj().T
        if self.real_bases:
            G = G.real
        trunc = truncated_eig_psd(G, max(self.eps_fill_in ** 2, GRAM_FLOOR), scale=scale)
        added = min(trunc.rank, m - k)
        if added == 0:
            return 0

        new = trunc.U[:, :added].astype(np.complex128)
        for _ in range(2):
            new -= B @ (B.conj().T @ new)
        new, _ = sla.qr(new, mode="economic", check_finite=False)
        self.basis[i] = np.hstack([B, new])
        logger.debug(f"Cluster {i} (level {self.level}): rank {k} -> {k + added}")
        return added

    def step1_projection(self, i: int) -> np.ndarray:
        """Q̃_i = [V⊥  V]: complement first, basis last."""
        B = self.basis[i]
        return np.hstack([unitary_completion(B), B])

    def step2_apply_projection(self, i: int, qtilde: np.ndarray) -> None:
        """Transform the near-field blocks of row and column i by Q̃_i."""
        if qtilde.shape != (self.size[i], self.size[i]):
            raise InvalidInputError(
                f"Q̃ of cluster {i} has shape {qtilde.shape}, cluster size is {self.size[i]}"
            )
        qh = qtilde.conj().T
        qc = qtilde.conj()
        for c in self.row_nbrs[i]:
            self.dense[(i, c)] = qh @ self.dense[(i, c)]
        for c in self.col_nbrs[i]:
            self.dense[(c, i)] = self.dense[(c, i)] @ qc
        self.qtilde[i] = qtilde

    def step3_partial_eliminate(self, i: int) -> EliminationRecord:
        """
        Eliminate the first m_i - k_i unknowns of cluster i.

        Raises:
            SingularPivotError: If the eliminated block has a pivot below tolerance
        """
        m = self.size[i]
        k = self.rank(i)
        e = m - k
        qtilde = self.qtilde[i]
        self.eliminated[i] = e
        if e == 0:
            return EliminationRecord(i, self.level, self.offset[i], m, 0, qtilde, _empty((0, 0)), _empty((0, 0)))

        Dii = self.dense[(i, i)]
        L, U = partial_lu(Dii[:e, :e], self.pivot_tol, cluster=i, level=self.level)

        lower: Dict[int, Tuple[slice, np.ndarray]] = {}
        for c in self.col_nbrs[i]:
            rows = slice(e, m) if c == i else slice(0, self.size[c])
            lower[c] = (rows, right_upper_solve(self.dense[(c, i)][rows, :e], U))
        upper: Dict[int, Tuple[slice, np.ndarray]] = {}
        for c in self.row_nbrs[i]:
            cols = slice(e, m) if c == i else slice(0, self.size[c])
            upper[c] = (cols, lower_solve(L, self.dense[(i, c)][:e, cols]))

        for j, (rows, Lb) in lower.items():
            for c, (cols, Ub) in upper.items():
                F = -(Lb @ Ub)
                if (j, c) in self.dense:
                    self.dense[(j, c)][rows, cols] += F
                    self.in_place_fill_ins += 1
                else:
                    self._store_fill_in(j, c, F)

        for c in self.row_nbrs[i]:
            self.dense[(i, c)][:e, :] = 0.0
        for c in self.col_nbrs[i]:
            self.dense[(c, i)][:, :e] = 0.0
        Dii[:e, :e] = np.eye(e)

        return EliminationRecord(
            cluster=i,
            level=self.level,
            offset=self.offset[i],
            size=m,
            eliminated_count=e,
            qtilde=qtilde,
            lower=L,
            upper=U,
            lower_blocks=[
                (self.offset[j] + r.start, self.offset[j] + r.stop, Lb) for j, (r, Lb) in lower.items()
            ],
            upper_blocks=[
                (self.offset[c] + s.start, self.offset[c] + s.stop, Ub) for c, (s, Ub) in upper.items()
            ],
            fill_in_count=len(lower) * len(upper),
        )

    def _store_fill_in(self, j: int, k: int, F: np.ndarray) -> None:
        """Move a fill-in to level-start coordinates and file it."""
        if j in self.qtilde:
            F = self.qtilde[j] @ F
        if k in self.qtilde:
            F = F @ self.qtilde[k].T
        self._file_fill_in(j, k, F)

    def _file_fill_in(self, j: int, k: int, F: np.ndarray) -> None:
        """
        Ledger entry for an admissible block of the level, carried entry otherwise.

        A pair that is neither near nor admissible here lies under a coarser
        admissible block. Its fill-in rides on a promoted zero-coupling block
        and moves up one level per merge until that block is reached.
        """
        if (j, k) in self.admissible:
            self.ledger.add(j, k, F)
            return
        if (j, k) not in self.virtual:
            self._promote(j, k)
        self.carried.add(j, k, F)

    def _promote(self, j: int, k: int) -> None:
        """Zero-coupling block for a pair covered by a coarser admissible block."""
        self.virtual.add((j, k))
        self.couplings[(j, k)] = _empty((self.coupling_rank[j], self.coupling_rank[k]))
        logger.debug(f"Level {self.level}: block ({j}, {k}) promoted to carry fill-in")

    def eliminate_cluster(self, i: int) -> EliminationRecord:
        """Steps 0 to 3 for one cluster."""
        rank_before = self.rank(i)
        self.step0_update_basis(i)
        qtilde = self.step1_projection(i)
        self.step2_apply_projection(i, qtilde)
        record = self.step3_partial_eliminate(i)
        record.rank_before = rank_before
        record.rank_after = self.rank(i)
        return record

    # ------------------------------------------------------------------
    # Level transitions

    def finish_level(self) -> None:
        """
        Fold the ledger into the couplings and zero-pad the parent transfer matrices.

        Couplings are padded to the updated ranks, then the ledger entry F of a
        block (j, k) contributes V_j^H F conj(V_k).
        """
        for key in self.coupling_keys:
            j, k = key
            S = self.couplings[key]
            S_new = _empty((self.rank(j), self.rank(k)))
            S_new[: S.shape[0], : S.shape[1]] = S
            F = self.ledger.get(j, k) if key in self.admissible else self.carried.get(j, k)
            if F is not None:
                S_new += self.basis[j].conj().T @ F @ self.basis[k].conj()
            self.couplings[key] = S_new

        if self.level > 0:
            for P in self.tree.levels[self.level - 1]:
                c1, c2 = self.tree.clusters[P].children
                T = self.transfer[P]
                k1 = self.coupling_rank[c1]
                pad1 = _empty((self.rank(c1) - k1, T.shape[1]))
                pad2 = _empty((self.rank(c2) - self.coupling_rank[c2], T.shape[1]))
                self.transfer[P] = np.vstack([T[:k1], pad1, T[k1:], pad2])

        for i in self.ids:
            self.coupling_rank[i] = self.rank(i)
        self.ledger.clear()
        self.carried.clear()

    def level_permutation(self) -> PermutationRecord:
        """Retained unknowns first (cluster order), eliminated unknowns last."""
        retained, eliminated = [], []
        for i in self.ids:
            start, e = self.offset[i], self.eliminated.get(i, 0)
            eliminated.append(np.arange(start, start + e))
            retained.append(np.arange(start + e, start + self.size[i]))
        perm = np.concatenate(retained + eliminated).astype(np.int64)
        n_retained = sum(r.size for r in retained)
        return PermutationRecord(self.level, perm, n_retained)

    def merge_permute(self) -> PermutationRecord:
        """
        Merge the retained unknowns of sibling clusters into their parents.

        Near-field blocks of the parent level are assembled from the retained
        parts of the children's near-field blocks and from the children's
        couplings. Couplings of promoted blocks move to the parent pair, as a
        ledger entry if it is admissible and as a carried entry otherwise.
        """
        record = self.level_permutation()
        l = self.level
        parents = self.tree.levels[l - 1]

        def parts(P: int) -> List[Tuple[int, slice]]:
            out, pos = [], 0
            for c in self.tree.clusters[P].children:
                out.append((c, slice(pos, pos + self.rank(c))))
                pos += self.rank(c)
            return out

        new_dense: Dict[Block, np.ndarray] = {}
        for P, Q in self.blocks.near_at(l - 1):
            pP, pQ = parts(P), parts(Q)
            M = _empty((pP[-1][1].stop, pQ[-1][1].stop))
            for c, rows in pP:
                for d, cols in pQ:
                    if (c, d) in self.dense:
                        M[rows, cols] = self.dense[(c, d)][self.eliminated[c]:, self.eliminated[d]:]
                    else:
                        M[rows, cols] = self.couplings[(c, d)]
            new_dense[(P, Q)] = M

        pending = []
        for c, d in sorted(self.virtual):
            P, Q = self.tree.clusters[c].parent, self.tree.clusters[d].parent
            pP, pQ = parts(P), parts(Q)
            F = _empty((pP[-1][1].stop, pQ[-1][1].stop))
            F[dict(pP)[c], dict(pQ)[d]] = self.couplings[(c, d)]
            pending.append((P, Q, F))

        for key in self.coupling_keys:
            del self.couplings[key]
        self.basis = {P: self.transfer.pop(P) for P in parents}
        self.dense = new_dense
        self.virtual = set()
        self.level = l - 1
        self._setup_level()

        for P, Q, F in pending:
            if (P, Q) in self.dense:
                self.dense[(P, Q)] += F
            else:
                self._file_fill_in(P, Q, F)
        return record

    # ------------------------------------------------------------------
    # Dense view

    def to_dense(self) -> np.ndarray:
        """
        Dense matrix of the active level in current coordinates.

        Processed clusters are seen through Q̃; coarser admissible blocks are
        expanded through the transfer matrices. Used for the root remainder
        and for shadow checks on small problems.
        """
        n = self.n_active
        M = _empty((n, n))
        span: Dict[int, Tuple[int, int]] = {}
        E: Dict[int, np.ndarray] = {}
        for i in self.ids:
            span[i] = (self.offset[i], self.offset[i] + self.size[i])
            B = self.basis[i][:, : self.coupling_rank[i]]
            if i in self.qtilde:
                B = self.qtilde[i].conj().T @ B
            E[i] = B

        def sl(i: int) -> slice:
            return slice(*span[i])

        for (c, d), D in self.dense.items():
            M[sl(c), sl(d)] += D
        for c, d in self.coupling_keys:
            M[sl(c), sl(d)] += E[c] @ self.couplings[(c, d)] @ E[d].T
        for (c, d), F in [*self.ledger.items(), *self.carried.items()]:
            if c in self.qtilde:
                F = self.qtilde[c].conj().T @ F
            if d in self.qtilde:
                F = F @ self.qtilde[d].conj()
            M[sl(c), sl(d)] += F

        for l in range(self.level - 1, -1, -1):
            for P in self.tree.levels[l]:
                c1, c2 = self.tree.clusters[P].children
                T = self.transfer[P]
                k1 = E[c1].shape[1]
                E[P] = np.vstack([E[c1] @ T[:k1], E[c2] @ T[k1:]])
                span[P] = (span[c1][0], span[c2][1])
            for A_, B_ in self.blocks.admissible_at(l):
                M[sl(A_), sl(B_)] += E[A_] @ self.couplings[(A_, B_)] @ E[B_].T
        return M


def _level_diagnostics(
    wm: WorkingMatrix,
    records: List[EliminationRecord],
    ledger_peak: int,
    carried_peak: int,
    chain_bytes: int,
    elapsed: float,
) -> Dict[str, Any]:
    return {
        "level": wm.level,
        "clusters": len(records),
        "active": wm.n_active,
        "max_rank_before": max((r.rank_before for r in records), default=0),
        "max_rank_after": max((r.rank_after for r in records), default=0),
        "rank_increase": sum(r.rank_after - r.rank_before for r in records),
        "eliminated": sum(r.eliminated_count for r in records),
        "fill_in_targets": sum(r.fill_in_count for r in records),
        "max_fill_in_targets": max((r.fill_in_count for r in records), default=0),
        "in_place_fill_ins": wm.in_place_fill_ins,
        "ledger_entries": ledger_peak,
        "carried_entries": carried_peak,
        "admissible_blocks": len(wm.admissible),
        "promoted_blocks": len(wm.virtual),
        "chain_nbytes": chain_bytes,
        "working_nbytes": wm.nbytes,
        "seconds": elapsed,
    }


def factorize(
    A: H2Matrix,
    eps_fill_in: float,
    stop_level_override: Optional[int] = None,
    pivot_tol: float = PIVOT_TOL,
) -> FactorChain:
    """
    Factor an H²-matrix level by level.

    Args:
        A: H²-matrix (not modified)
        eps_fill_in: Truncation tolerance of the fill-in driven basis updates
        stop_level_override: Last level to process; clamped to at least l0
        pivot_tol: Relative pivot tolerance for the partial LUs

    Returns:
        FactorChain

    Raises:
        InvalidInputError: For an out-of-range tolerance or stop level
        SingularPivotError: If an elimination meets a pivot below tolerance
    """
    tree = A.tree
    depth = tree.depth
    if stop_level_override is not None and not 0 <= stop_level_override <= depth:
        raise InvalidInputError(f"stop level must lie in [0, {depth}], got {stop_level_override}")

    wm = WorkingMatrix(A, eps_fill_in, pivot_tol)
    peak = wm.nbytes
    chain_bytes = 0
    levels: List[LevelFactor] = []
    diagnostics: List[Dict[str, Any]] = []

    l0 = A.blocks.l0
    if l0 is None:
        stop = None
        logger.info("No admissible blocks: factoring the matrix densely")
    else:
        stop = l0
        if stop_level_override is not None:
            if stop_level_override < l0:
                logger.warning(f"Stop level {stop_level_override} is above l0={l0}; stopping at l0")
            stop = max(l0, stop_level_override)

    started = time.perf_counter()
    if stop is not None:
        while True:
            t0 = time.perf_counter()
            records = []
            for i in tree.levels[wm.level]:
                record = wm.eliminate_cluster(i)
                records.append(record)
                chain_bytes += record.nbytes
                peak = max(peak, wm.nbytes + chain_bytes)
            ledger_peak, carried_peak = wm.ledger.peak, wm.carried.peak
            wm.finish_level()

            level = wm.level
            eliminated = sum(r.eliminated_count for r in records)
            diag = _level_diagnostics(
                wm, records, ledger_peak, carried_peak, chain_bytes, time.perf_counter() - t0
            )
            diagnostics.append(diag)
            logger.info(
                f"Level {level}: eliminated {eliminated} of {wm.n_active}, max rank "
                f"{diag['max_rank_before']} -> {diag['max_rank_after']}, "
                f"{diag['fill_in_targets']} fill-ins, {diag['promoted_blocks']} promoted blocks"
            )

            if level == stop or eliminated == 0:
                if level != stop:
                    logger.warning(f"Level {level} eliminated nothing; stopping early")
                permutation = wm.level_permutation()
                levels.append(LevelFactor(level, records, permutation))
                break
            permutation = wm.merge_permute()
            levels.append(LevelFactor(level, records, permutation))
            chain_bytes += permutation.perm.nbytes
            peak = max(peak, wm.nbytes + chain_bytes)

    if levels:
        permutation = levels[-1].permutation
        keep = permutation.perm[: permutation.n_retained]
        remainder = wm.to_dense()[np.ix_(keep, keep)]
        stop_level = levels[-1].level
    else:
        remainder = wm.to_dense()
        stop_level = None

    root_perm, root_lower, root_upper = dense_lu(remainder, pivot_tol, cluster=tree.root, level=stop_level)
    chain = FactorChain(
        n=A.n,
        levels=levels,
        root_perm=root_perm,
        root_lower=root_lower,
        root_upper=root_upper,
        stop_level=stop_level,
        eps_fill_in=eps_fill_in,
        diagnostics=diagnostics,
    )
    chain.peak_nbytes = int(max(peak, wm.nbytes + chain.nbytes))
    logger.info(
        f"Factorization done in {time.perf_counter() - started:.3f}s: stop level {stop_level}, "
        f"root size {chain.n_root}, {chain.nbytes / 2**20:.2f} MiB"
    )
    return chain
