"""
Oracles, residual metrics and the scaling experiments.

    relative_residual      ‖Z_H2 x - b‖ / ‖b‖ with Z_H2 the input H²-matrix
    dense_oracle_solve     dense assembly + pivoted LU, original point order
    replay_dense_shadow    multiplies 𝓛 𝓤 out and compares with the H²-matrix
    run_fixture            one build -> factor -> solve run with timings
    scaling_sweep          run_fixture over a list of N plus log-log slopes
    accuracy_sweep         one fixture factored at several eps_fill_in values
    inconsistent_residuals tolerance pairs where tightening eps_fill_in hurt the residual
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .config import RunConfig
from .errors import DenseGuardError, InvalidInputError
from .factorization import FactorChain, factorize
from .geometry_tree import PointCloud, build_block_tree, build_cluster_tree
from .h2_construct import DENSE_GUARD, H2Matrix, assemble_dense, build_h2, h2_matvec, h2_to_dense
from .kernels import KernelSpec
from .solve import apply_lower, apply_upper, solve

# Set up logging
logger = logging.getLogger(__name__)

REPLAY_GUARD = 200
SOLVE_REPEATS = 3

CSV_COLUMNS = [
    "N", "family", "kernel", "eps_h2", "eps_fill_in", "t_build", "t_factor", "t_solve",
    "mem_h2", "mem_factor", "mem_chain", "csp", "eps_rel", "depth", "l0", "stop_level",
    "max_rank_per_level",
]


@dataclass
class RunMetrics:
    """
    Measurements of one build -> factor -> solve run.

    Times are seconds, memory is bytes. mem_factor is the peak
    working-plus-factor storage of the factorization, mem_chain the storage of
    the finished factors alone.
    """

    n: int
    family: str
    kernel: str
    eps_h2: float
    eps_fill_in: float
    t_build: float
    t_factor: float
    t_solve: float
    mem_h2: int
    mem_factor: int
    mem_chain: int
    csp: int
    eps_rel: float
    depth: int
    l0: Optional[int]
    stop_level: Optional[int]
    max_rank_per_level: List[int] = field(default_factory=list)

    def to_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row["N"] = row.pop("n")
        row["max_rank_per_level"] = ";".join(str(k) for k in self.max_rank_per_level)
        return row

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["N"] = data.pop("n")
        return data


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares fit of log(value) = slope * log(N) + intercept."""

    slope: float
    intercept: float
    degenerate: bool = False


@dataclass
class SweepResult:
    runs: List[RunMetrics]
    slopes: Dict[str, SlopeFit]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "runs": [r.to_dict() for r in self.runs],
            "slopes": {k: asdict(v) for k, v in self.slopes.items()},
        }


def relative_residual(A: H2Matrix, x: np.ndarray, b: np.ndarray) -> float:
    """
    ‖h2_matvec(A, x) - b‖₂ / ‖b‖₂ (tree ordering).

    Raises:
        InvalidInputError: If b is zero or the dimensions do not match
    """
    b = np.asarray(b)
    if b.shape[0] != A.n:
        raise InvalidInputError(f"Dimension mismatch: H² matrix has N={A.n}, right-hand side has shape {b.shape}")
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        raise InvalidInputError("Relative residual is undefined for a zero right-hand side")
    return float(np.linalg.norm(h2_matvec(A, x) - b)) / norm_b


def dense_oracle_solve(kernel: KernelSpec, pc: PointCloud, b: np.ndarray, guard: int = DENSE_GUARD) -> np.ndarray:
    """
    Solve Z x = b densely with partial pivoting.

    Args:
        kernel: Kernel definition
        pc: Point cloud; x and b are in its original point order
        b: Right-hand side (N,) or (N, r)
        guard: Largest N accepted

    Raises:
        DenseGuardError: If N exceeds the guard
    """
    Z = assemble_dense(kernel, pc, guard=guard)
    b = np.asarray(b)
    if b.shape[0] != pc.n:
        raise InvalidInputError(f"Dimension mismatch: N={pc.n}, right-hand side has shape {b.shape}")
    return sla.lu_solve(sla.lu_factor(Z, check_finite=False), b.astype(np.complex128), check_finite=False)


def dense_solve_h2(A: H2Matrix, b: np.ndarray, guard: int = DENSE_GUARD) -> np.ndarray:
    """Dense pivoted solve with the matrix the H² representation stands for (tree ordering)."""
    Z = h2_to_dense(A, guard)
    return sla.lu_solve(sla.lu_factor(Z, check_finite=False), np.asarray(b, dtype=np.complex128), check_finite=False)


def replay_dense_shadow(chain: FactorChain, A: H2Matrix, guard: int = REPLAY_GUARD) -> float:
    """
    Relative Frobenius distance between 𝓛 𝓤 and the dense shadow of A.

    Raises:
        DenseGuardError: If N exceeds the guard
    """
    if A.n > guard:
        raise DenseGuardError(A.n, guard)
    if chain.n != A.n:
        raise InvalidInputError(f"Chain dimension {chain.n} does not match matrix dimension {A.n}")
    Z = h2_to_dense(A, guard)
    product = apply_lower(chain, apply_upper(chain, np.eye(A.n, dtype=np.complex128)))
    return float(np.linalg.norm(product - Z) / np.linalg.norm(Z))


def fit_loglog_slope(ns: Sequence[float], values: Sequence[float]) -> SlopeFit:
    """
    Slope of log(values) against log(ns).

    Fewer than two distinct N, or a non-positive value, gives a degenerate fit
    with slope NaN.
    """
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if ns.size != values.size:
        raise InvalidInputError(f"Got {ns.size} sizes but {values.size} values")
    if np.unique(ns).size < 2 or np.any(values <= 0) or np.any(ns <= 0):
        logger.warning("Slope fit is degenerate (needs two distinct N and positive values)")
        return SlopeFit(float("nan"), float("nan"), True)
    slope, intercept = np.polyfit(np.log(ns), np.log(values), 1)
    return SlopeFit(float(slope), float(intercept))


def build_operator(config: RunConfig, pc: Optional[PointCloud] = None) -> Tuple[H2Matrix, float]:
    """Tree, block partition and H²-matrix for a configuration; returns the matrix and the build time."""
    pc = pc if pc is not None else config.point_cloud()
    t0 = time.perf_counter()
    tree = build_cluster_tree(pc, config.leafsize)
    blocks = build_block_tree(tree, config.eta)
    A = build_h2(config.kernel_spec(), tree, blocks, config.eps_h2, real_bases=config.real_bases)
    return A, time.perf_counter() - t0


def random_rhs(n: int, seed: int) -> np.ndarray:
    """Seeded complex right-hand side."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


def _measure(config: RunConfig, A: H2Matrix, t_build: float, eps_fill_in: float) -> RunMetrics:
    t0 = time.perf_counter()
    chain = factorize(A, eps_fill_in, config.stop_level)
    t_factor = time.perf_counter() - t0

    b = random_rhs(A.n, config.seed)
    timings = []
    for _ in range(SOLVE_REPEATS):
        t0 = time.perf_counter()
        x = solve(chain, b)
        timings.append(time.perf_counter() - t0)

    metrics = RunMetrics(
        n=A.n,
        family=config.geometry,
        kernel=config.kernel,
        eps_h2=config.eps_h2,
        eps_fill_in=eps_fill_in,
        t_build=t_build,
        t_factor=t_factor,
        t_solve=statistics.median(timings),
        mem_h2=A.nbytes,
        mem_factor=chain.peak_nbytes,
        mem_chain=chain.nbytes,
        csp=A.blocks.max_csp,
        eps_rel=relative_residual(A, x, b),
        depth=A.depth,
        l0=A.blocks.l0,
        stop_level=chain.stop_level,
        max_rank_per_level=A.max_rank_per_level(),
    )
    logger.info(
        f"N={metrics.n}: build {t_build:.2f}s, factor {t_factor:.2f}s, solve {metrics.t_solve * 1e3:.1f}ms, "
        f"eps_rel={metrics.eps_rel:.2e}"
    )
    return metrics


def run_fixture(config: RunConfig) -> RunMetrics:
    """One build -> factor -> solve run of the configured fixture."""
    config.validate()
    A, t_build = build_operator(config)
    return _measure(config, A, t_build, config.eps_fill_in)


def scaling_sweep(config: RunConfig, sizes: Sequence[int]) -> SweepResult:
    """
    Run the fixture for every N in `sizes` and fit log-log slopes.

    Slopes are fitted for the solve time, the factorization time, the
    factorization and H² memory, and for the factorization time and memory
    normalized by the measured csp (csp² for the time on 3-D fixtures).
    """
    runs = []
    for n in sizes:
        runs.append(run_fixture(config.merged({"points": int(n)})))

    ns = [r.n for r in runs]
    power = 2 if config.geometry == "cube-3d" else 1
    slopes = {
        "t_solve": fit_loglog_slope(ns, [r.t_solve for r in runs]),
        "t_factor": fit_loglog_slope(ns, [r.t_factor for r in runs]),
        "mem_factor": fit_loglog_slope(ns, [r.mem_factor for r in runs]),
        "mem_h2": fit_loglog_slope(ns, [r.mem_h2 for r in runs]),
        "t_factor_per_csp": fit_loglog_slope(ns, [r.t_factor / r.csp ** power for r in runs]),
        "mem_factor_per_csp": fit_loglog_slope(ns, [r.mem_factor / r.csp for r in runs]),
    }
    for name, fit in slopes.items():
        if not fit.degenerate:
            logger.info(f"Slope of {name}: {fit.slope:.3f}")
    return SweepResult(runs, slopes)


def accuracy_sweep(config: RunConfig, eps_values: Sequence[float]) -> List[RunMetrics]:
    """Factor one fixture at every eps_fill_in in `eps_values`; the H²-matrix is built once."""
    config.validate()
    A, t_build = build_operator(config)
    runs = []
    for eps in eps_values:
        runs.append(_measure(config, A, t_build, float(eps)))
    return runs


def inconsistent_residuals(
    runs: Sequence[RunMetrics], tighten: float = 100.0, slack: float = 2.0
) -> List[Tuple[float, float]]:
    """
    Pairs of fill-in tolerances whose residuals break accuracy control.

    For every pair of runs where eps_fill_in shrinks by at least `tighten`,
    the tighter run must not have a residual above `slack` times the looser
    one.

    Returns:
        (loose eps_fill_in, tight eps_fill_in) for each violating pair
    """
    bad = []
    for loose in runs:
        for tight in runs:
            if tight.eps_fill_in * tighten > loose.eps_fill_in * (1 + 1e-9):
                continue
            if tight.eps_rel > slack * loose.eps_rel:
                logger.warning(
                    f"eps_fill_in {loose.eps_fill_in:g} -> {tight.eps_fill_in:g}: residual "
                    f"{loose.eps_rel:.3e} -> {tight.eps_rel:.3e}"
                )
                bad.append((loose.eps_fill_in, tight.eps_fill_in))
    return bad


def write_metrics_csv(path: Path, runs: Sequence[RunMetrics]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for run in runs:
            writer.writerow(run.to_row())
    return path


def write_metrics_jsonl(path: Path, runs: Sequence[RunMetrics]) -> Path:
    path = Path(path)
    with path.open("w") as f:
        for run in runs:
            f.write(json.dumps(run.to_dict()) + "\n")
    return path
