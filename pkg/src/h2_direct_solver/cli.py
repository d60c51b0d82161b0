"""
h2solve: build, factor, solve, verify and benchmark H²-matrix direct solutions.

Exit codes:
    0  success, every requested tolerance met
    1  finished, but a tolerance was not met
    2  invalid input (arguments, files, dimension mismatch, dense guard)
    3  numerical failure (singular pivot, broken orthonormality)
"""

import argparse
import logging
import math
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from rich.logging import RichHandler

from . import __version__
from .config import RunConfig
from .errors import InvalidInputError, NumericalError
from .factorization import GRAM_FLOOR, FactorChain, factorize
from .geometry_tree import FIXTURE_FAMILIES, tree_statistics
from .h2_construct import H2Matrix
from .kernels import KERNEL_KINDS
from .solve import solve
from .storage import load_factorization, load_h2, load_vector, save_factorization, save_h2, save_vector
from .utils import (
    emit_json,
    err_console,
    show_error,
    show_level_diagnostics,
    show_messages,
    show_metrics_table,
    show_solve_report,
    show_tree_statistics,
)
from .verify_bench import (
    REPLAY_GUARD,
    accuracy_sweep,
    build_operator,
    dense_oracle_solve,
    inconsistent_residuals,
    random_rhs,
    relative_residual,
    replay_dense_shadow,
    scaling_sweep,
    write_metrics_csv,
    write_metrics_jsonl,
)

# Set up logging
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

ORACLE_TOLERANCE = 1e-4
REPLAY_FACTOR = 100.0

MATRIX_FILE = "matrix.h2ds"
FACTOR_FILE = "factor.h2ds"
SOLUTION_FILE = "solution.bin"

# RunConfig fields that have a command-line flag of the same name
CONFIG_FLAGS = (
    "geometry", "points", "points_file", "kernel", "wavenumber", "leafsize", "eta",
    "eps_h2", "eps_fill_in", "stop_level", "seed", "out",
)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration (flags override it)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging")
    common.add_argument("--json", action="store_true", help="Write a machine-readable JSON report to stdout")
    common.add_argument("--geometry", choices=FIXTURE_FAMILIES, help="Point fixture family (default: rod-1d)")
    common.add_argument("--points", type=int, help="Number of fixture points (default: 400)")
    common.add_argument("--points-file", type=Path, help="Read points from a .csv/.txt/.bin file instead")
    common.add_argument(
        "--kernel", choices=[k for k in KERNEL_KINDS if k != "custom"], help="Kernel (default: laplace)"
    )
    common.add_argument("--wavenumber", type=str, help="Helmholtz wavenumber, e.g. 2.0 or 2+0.1j")
    common.add_argument("--leafsize", type=int, help="Maximum points per leaf (default: 25)")
    common.add_argument("--eta", type=float, help="Admissibility parameter (default: 1.0)")
    common.add_argument("--eps-h2", type=float, help="H² construction accuracy (default: 1e-3)")
    common.add_argument("--eps-fill-in", type=float, help="Fill-in truncation accuracy (default: 1e-5)")
    common.add_argument("--stop-level", type=int, help="Last level to eliminate (clamped to at least l0)")
    common.add_argument("--seed", type=int, help="Seed for fixtures and random right-hand sides (default: 0)")
    common.add_argument("--out", type=Path, help="Output directory (default: h2_out)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="h2solve", description="Accuracy-controlled direct solution of H²-matrix systems"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build", parents=[common], help="Build and store an H²-matrix")
    build.set_defaults(handler=cmd_build)

    factor = sub.add_parser("factor", parents=[common], help="Factor an H²-matrix")
    factor.add_argument("--matrix", type=Path, help="Stored H²-matrix (built from the configuration if omitted)")
    factor.set_defaults(handler=cmd_factor)

    solve_p = sub.add_parser("solve", parents=[common], help="Solve with a stored factorization")
    solve_p.add_argument("--chain", type=Path, help="Stored factorization (built and factored if omitted)")
    rhs = solve_p.add_mutually_exclusive_group()
    rhs.add_argument("--rhs", type=Path, help="Right-hand side in original point order (.csv/.txt/.bin)")
    rhs.add_argument("--random-rhs", type=int, metavar="SEED", help="Seeded complex random right-hand side")
    solve_p.add_argument("--tolerance", type=float, help="Residual bound for the exit code")
    solve_p.set_defaults(handler=cmd_solve)

    verify = sub.add_parser("verify", parents=[common], help="Compare against the dense oracle and replay")
    verify.add_argument(
        "--tolerance", type=float, help=f"Bound on the error against the dense solve (default: {ORACLE_TOLERANCE})"
    )
    verify.set_defaults(handler=cmd_verify)

    bench = sub.add_parser("bench", parents=[common], help="Scaling or accuracy sweep, CSV/JSONL output")
    bench.add_argument("--sizes", type=_int_list, help="Comma-separated N values, e.g. 800,1600,3200")
    bench.add_argument("--family", dest="geometry", choices=FIXTURE_FAMILIES, help="Alias of --geometry")
    bench.add_argument(
        "--eps-values", type=_float_list, help="Comma-separated eps_fill_in values for an accuracy sweep"
    )
    bench.set_defaults(handler=cmd_bench)
    return parser


def setup_logging(verbose: int) -> None:
    """Route log records through rich on stderr."""
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config, then explicit flags."""
    config = RunConfig()
    if args.config is not None:
        config = RunConfig.from_toml(args.config, config)
    overrides = {name: getattr(args, name, None) for name in CONFIG_FLAGS}
    return config.merged(overrides).validate()


def _output_dir(config: RunConfig) -> Path:
    config.out.mkdir(parents=True, exist_ok=True)
    return config.out


def _build(config: RunConfig) -> H2Matrix:
    A, t_build = build_operator(config)
    A.meta["t_build"] = t_build
    return A


def cmd_build(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """Build tree, block partition and H²-matrix, then store the matrix."""
    A = _build(config)
    stats = tree_statistics(A.tree, A.blocks)
    stats["max_rank_per_level"] = A.max_rank_per_level()
    path = save_h2(_output_dir(config) / MATRIX_FILE, A)
    return {
        "ok": True,
        "command": "build",
        "matrix": str(path),
        "t_build": A.meta["t_build"],
        "mem_h2": A.nbytes,
        "stats": stats,
    }


def cmd_factor(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """Factor a stored (or freshly built) H²-matrix and store the factorization."""
    if args.matrix is not None:
        A = load_h2(args.matrix)
    else:
        A = _build(config)
    t0 = time.perf_counter()
    chain = factorize(A, config.eps_fill_in, config.stop_level)
    t_factor = time.perf_counter() - t0
    path = save_factorization(_output_dir(config) / FACTOR_FILE, A, chain)
    return {
        "ok": True,
        "command": "factor",
        "chain": str(path),
        "n": A.n,
        "stop_level": chain.stop_level,
        "n_root": chain.n_root,
        "t_factor": t_factor,
        "mem_chain": chain.nbytes,
        "mem_peak": chain.peak_nbytes,
        "diagnostics": chain.diagnostics,
    }


def _load_or_factor(config: RunConfig, args: argparse.Namespace):
    if args.chain is not None:
        return load_factorization(args.chain)
    A = _build(config)
    return A, factorize(A, config.eps_fill_in, config.stop_level)


def cmd_solve(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """Solve Z x = b; b and x are in original point order on disk."""
    A, chain = _load_or_factor(config, args)
    if args.rhs is not None:
        b = load_vector(args.rhs)
        source = str(args.rhs)
    else:
        seed = args.random_rhs if args.random_rhs is not None else config.seed
        b = random_rhs(A.n, seed)
        source = f"random (seed {seed})"
    if b.shape[0] != A.n:
        raise InvalidInputError(f"Dimension mismatch: factorization has N={A.n}, right-hand side has {b.shape[0]}")

    b_tree = A.tree.to_tree_order(b)
    t0 = time.perf_counter()
    x_tree = solve(chain, b_tree)
    seconds = time.perf_counter() - t0
    eps_rel = relative_residual(A, x_tree, b_tree) if np.any(b_tree) else 0.0

    path = save_vector(_output_dir(config) / SOLUTION_FILE, A.tree.from_tree_order(x_tree))
    ok = args.tolerance is None or eps_rel <= args.tolerance
    return {
        "ok": bool(ok),
        "command": "solve",
        "n": A.n,
        "rhs": source,
        "eps_rel": eps_rel,
        "tolerance": args.tolerance,
        "seconds": seconds,
        "solution": str(path),
    }


def cmd_verify(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """Check the H² solution against the dense oracle and, for small N, the factor replay."""
    pc = config.point_cloud()
    A, t_build = build_operator(config, pc)
    chain: FactorChain = factorize(A, config.eps_fill_in, config.stop_level)

    b = random_rhs(A.n, config.seed)
    b_tree = A.tree.to_tree_order(b)
    x_tree = solve(chain, b_tree)
    x = A.tree.from_tree_order(x_tree)
    x_ref = dense_oracle_solve(config.kernel_spec(), pc, b, config.dense_guard)
    oracle_error = float(np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref))

    tolerance = args.tolerance if args.tolerance is not None else ORACLE_TOLERANCE
    # the Gram floor caps the effective fill-in accuracy
    replay_bound = REPLAY_FACTOR * max(config.eps_fill_in, math.sqrt(GRAM_FLOOR))
    replay = replay_dense_shadow(chain, A) if A.n <= REPLAY_GUARD else None
    if replay is None:
        logger.info(f"N={A.n} exceeds {REPLAY_GUARD}; skipping the factor replay")

    ok = oracle_error <= tolerance and (replay is None or replay <= replay_bound)
    return {
        "ok": bool(ok),
        "command": "verify",
        "n": A.n,
        "oracle_error": oracle_error,
        "tolerance": tolerance,
        "replay_error": replay,
        "replay_bound": replay_bound,
        "eps_rel": relative_residual(A, x_tree, b_tree),
        "fill_in_targets": sum(d["fill_in_targets"] for d in chain.diagnostics),
        "t_build": t_build,
    }


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    """Scaling sweep over --sizes, or accuracy sweep over --eps-values."""
    out = _output_dir(config)
    if args.eps_values:
        runs = accuracy_sweep(config, args.eps_values)
        slopes = {}
        inconsistent = inconsistent_residuals(runs)
    else:
        sizes = args.sizes or [config.points]
        sweep = scaling_sweep(config, sizes)
        runs, slopes = sweep.runs, sweep.slopes
        inconsistent = []
    csv_path = write_metrics_csv(out / "metrics.csv", runs)
    jsonl_path = write_metrics_jsonl(out / "metrics.jsonl", runs)
    slope_data = {
        name: {"slope": fit.slope, "intercept": fit.intercept, "degenerate": fit.degenerate}
        for name, fit in slopes.items()
    }
    return {
        "ok": True,
        "command": "bench",
        "runs": [r.to_dict() for r in runs],
        "slopes": slope_data,
        "degenerate_slopes": any(fit.degenerate for fit in slopes.values()),
        "inconsistent_residuals": [list(pair) for pair in inconsistent],
        "csv": str(csv_path),
        "jsonl": str(jsonl_path),
    }


def _render(report: Dict[str, Any]) -> None:
    command = report["command"]
    if command == "build":
        show_tree_statistics(report["stats"])
        show_messages([f"Matrix written to {report['matrix']} ({report['t_build']:.2f}s)"], "🏗 build")
    elif command == "factor":
        show_level_diagnostics(report["diagnostics"])
        show_messages(
            [
                f"Stop level {report['stop_level']}, root size {report['n_root']}",
                f"Factorization written to {report['chain']} ({report['t_factor']:.2f}s)",
            ],
            "🧮 factor",
        )
    elif command == "solve":
        show_solve_report(report)
    elif command == "verify":
        replay = report["replay_error"]
        lines = [
            f"Error against dense solve: {report['oracle_error']:.3e} (bound {report['tolerance']:.1e})",
            f"Relative residual: {report['eps_rel']:.3e}",
            "Factor replay: skipped" if replay is None
            else f"Factor replay: {replay:.3e} (bound {report['replay_bound']:.1e})",
        ]
        show_messages(lines, "✓ verify" if report["ok"] else "⚠ verify", "green" if report["ok"] else "yellow")
    elif command == "bench":
        show_metrics_table(report["runs"], report["slopes"])
        lines = [f"Metrics written to {report['csv']} and {report['jsonl']}"]
        for loose, tight in report["inconsistent_residuals"]:
            lines.append(f"Residual grew when eps_fill_in tightened from {loose:g} to {tight:g}")
        show_messages(lines, "📊 bench")


def _fail(message: str, exit_code: int, as_json: bool) -> int:
    if as_json:
        emit_json({"ok": False, "error": message, "exit_code": exit_code})
    else:
        show_error(message, exit_code)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    handler: Callable[[RunConfig, argparse.Namespace], Dict[str, Any]] = args.handler

    try:
        config = resolve_config(args)
        report = handler(config, args)
    except (InvalidInputError, OSError) as e:
        logger.debug("Input error", exc_info=True)
        return _fail(str(e), EXIT_INPUT, args.json)
    except NumericalError as e:
        logger.debug("Numerical failure", exc_info=True)
        return _fail(str(e), EXIT_NUMERICAL, args.json)

    report["config"] = config.to_dict()
    if args.json:
        emit_json(report)
    else:
        _render(report)
    return EXIT_OK if report["ok"] else EXIT_TOLERANCE


if __name__ == "__main__":
    raise SystemExit(main())
