"""
h2_direct_solver: accuracy-controlled direct factorization and solution of
H²-matrices.

Typical use:

    pc = fixture_points("rod-1d", 800)
    tree = build_cluster_tree(pc, leafsize=25)
    blocks = build_block_tree(tree, eta=1.0)
    A = build_h2(KernelSpec.laplace(scale_diagonal=True), tree, blocks, eps_h2=1e-3)
    chain = factorize(A, eps_fill_in=1e-5)
    x = tree.from_tree_order(solve(chain, tree.to_tree_order(b)))
"""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import (
    DenseGuardError,
    H2SolverError,
    InvalidInputError,
    NotOrthonormalError,
    NumericalError,
    SingularPivotError,
)
from .factorization import FactorChain, FillInLedger, WorkingMatrix, factorize
from .geometry_tree import (
    BlockClusterTree,
    Cluster,
    ClusterTree,
    PointCloud,
    admissible_coverage,
    build_block_tree,
    build_cluster_tree,
    fixture_points,
    tree_statistics,
)
from .h2_construct import H2Matrix, build_h2, h2_matvec, h2_to_dense, reconstruct_block
from .kernels import KernelSpec
from .solve import apply_inverse, backward_substitute, forward_substitute, solve
from .verify_bench import (
    dense_oracle_solve,
    relative_residual,
    replay_dense_shadow,
    run_fixture,
    scaling_sweep,
)

__all__ = [
    "__version__",
    "RunConfig",
    "DenseGuardError",
    "H2SolverError",
    "InvalidInputError",
    "NotOrthonormalError",
    "NumericalError",
    "SingularPivotError",
    "FactorChain",
    "FillInLedger",
    "WorkingMatrix",
    "factorize",
    "BlockClusterTree",
    "Cluster",
    "ClusterTree",
    "PointCloud",
    "build_block_tree",
    "build_cluster_tree",
    "fixture_points",
    "admissible_coverage",
    "tree_statistics",
    "H2Matrix",
    "build_h2",
    "h2_matvec",
    "h2_to_dense",
    "reconstruct_block",
    "KernelSpec",
    "apply_inverse",
    "backward_substitute",
    "forward_substitute",
    "solve",
    "dense_oracle_solve",
    "relative_residual",
    "replay_dense_shadow",
    "run_fixture",
    "scaling_sweep",
]
