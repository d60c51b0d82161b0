"""
Oracle, replay and benchmark tests.

The slow tests reproduce the accuracy-control sweep and the complexity
slopes on the rod fixture; deselect them with -m "not slow".
"""

import csv
import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from h2_direct_solver.config import RunConfig
from h2_direct_solver.errors import DenseGuardError, InvalidInputError
from h2_direct_solver.factorization import factorize
from h2_direct_solver.geometry_tree import fixture_points
from h2_direct_solver.solve import solve
from h2_direct_solver.verify_bench import (
    CSV_COLUMNS,
    accuracy_sweep,
    dense_oracle_solve,
    fit_loglog_slope,
    inconsistent_residuals,
    random_rhs,
    relative_residual,
    replay_dense_shadow,
    run_fixture,
    scaling_sweep,
    write_metrics_csv,
    write_metrics_jsonl,
)


class TestDenseOracle:
    """Solutions agree with dense LU on the kernel matrix."""

    @pytest.mark.parametrize("kind", ["laplace", "helmholtz"])
    @pytest.mark.parametrize("n", [100, 200, 400])
    def test_oracle_equivalence(self, make_h2, laplace_kernel, helmholtz_kernel, kind, n):
        """eps_h2 = 1e-6 and eps_fill_in = 1e-8 reproduce the dense solution to 1e-4."""
        kernel = laplace_kernel if kind == "laplace" else helmholtz_kernel
        A = make_h2(kernel, n, eps_h2=1e-6)
        chain = factorize(A, 1e-8)
        b = random_rhs(n, seed=7)
        x = A.tree.from_tree_order(solve(chain, A.tree.to_tree_order(b)))
        x_ref = dense_oracle_solve(kernel, fixture_points("rod-1d", n), b)
        assert np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref) <= 1e-4

    def test_oracle_guard(self, laplace_kernel):
        """The dense oracle refuses N above its guard."""
        with pytest.raises(DenseGuardError):
            dense_oracle_solve(laplace_kernel, fixture_points("rod-1d", 60), np.ones(60), guard=50)

    def test_oracle_dimension_mismatch(self, laplace_kernel):
        """b must match the point cloud."""
        with pytest.raises(InvalidInputError):
            dense_oracle_solve(laplace_kernel, fixture_points("rod-1d", 60), np.ones(59))


class TestReplay:
    """𝓛 𝓤 multiplied out reproduces the H²-matrix."""

    @pytest.mark.parametrize("kind", ["laplace", "helmholtz"])
    @pytest.mark.parametrize("n", [100, 200])
    def test_replay_within_fill_in_tolerance(self, make_h2, laplace_kernel, helmholtz_kernel, kind, n):
        """The replay error is at most 100 eps_fill_in, with fill-ins actually generated."""
        eps = 1e-6
        A = make_h2(laplace_kernel if kind == "laplace" else helmholtz_kernel, n)
        chain = factorize(A, eps)
        assert sum(d["ledger_entries"] for d in chain.diagnostics) > 0
        assert replay_dense_shadow(chain, A) <= 100 * eps

    def test_replay_of_dense_factorization(self, make_h2, laplace_kernel):
        """Without admissible blocks the replay is exact."""
        A = make_h2(laplace_kernel, 20)
        assert replay_dense_shadow(factorize(A, 1e-6), A) <= 1e-13

    def test_replay_guard(self, laplace_h2):
        """The replay refuses N above its guard."""
        chain = factorize(laplace_h2, 1e-5)
        with pytest.raises(DenseGuardError):
            replay_dense_shadow(chain, laplace_h2, guard=100)


class TestMetrics:
    """Residuals and slope fits."""

    def test_zero_rhs_residual(self, laplace_h2):
        """The relative residual is undefined for b = 0."""
        with pytest.raises(InvalidInputError):
            relative_residual(laplace_h2, np.zeros(laplace_h2.n), np.zeros(laplace_h2.n))

    def test_residual_dimension_mismatch(self, laplace_h2):
        """b must have length N."""
        with pytest.raises(InvalidInputError):
            relative_residual(laplace_h2, np.ones(laplace_h2.n), np.ones(3))

    def test_exact_power_law(self):
        """Values proportional to N² have slope 2."""
        ns = [100, 200, 400, 800]
        fit = fit_loglog_slope(ns, [3.0 * n ** 2 for n in ns])
        assert not fit.degenerate
        assert fit.slope == pytest.approx(2.0, abs=1e-10)
        assert math.exp(fit.intercept) == pytest.approx(3.0, rel=1e-8)

    def test_single_size_is_degenerate(self):
        """One distinct N gives a degenerate fit."""
        fit = fit_loglog_slope([400, 400], [1.0, 2.0])
        assert fit.degenerate
        assert math.isnan(fit.slope)

    def test_length_mismatch(self):
        """Sizes and values must pair up."""
        with pytest.raises(InvalidInputError):
            fit_loglog_slope([1, 2], [1.0])

    def test_random_rhs_seeded(self):
        """Same seed, same right-hand side."""
        np.testing.assert_array_equal(random_rhs(10, 3), random_rhs(10, 3))
        assert np.iscomplexobj(random_rhs(10, 3))


class TestRunFixture:
    """Single runs and sweeps on small fixtures."""

    def test_run_fixture(self):
        """A default-parameter run reports consistent metrics."""
        m = run_fixture(RunConfig(points=200))
        assert m.n == 200
        assert m.eps_rel <= 1e-3
        assert m.mem_factor >= m.mem_h2 > 0
        assert m.t_factor > 0 and m.t_solve > 0
        assert m.l0 == 2 and m.stop_level == 2
        assert len(m.max_rank_per_level) == m.depth + 1
        assert set(m.to_row()) == set(CSV_COLUMNS)

    def test_scaling_sweep(self):
        """Two sizes give non-degenerate slopes for every metric."""
        result = scaling_sweep(RunConfig(points=100), [200, 400])
        assert [r.n for r in result.runs] == [200, 400]
        assert set(result.slopes) == {
            "t_solve", "t_factor", "mem_factor", "mem_h2", "t_factor_per_csp", "mem_factor_per_csp",
        }
        assert not any(fit.degenerate for fit in result.slopes.values())
        json.dumps(result.to_dict())

    def test_single_size_sweep(self):
        """A sweep over one N reports degenerate slopes."""
        result = scaling_sweep(RunConfig(), [200])
        assert all(fit.degenerate for fit in result.slopes.values())

    def test_metric_files(self, test_workspace):
        """CSV and JSONL output carry one row per run."""
        runs = accuracy_sweep(RunConfig(points=200), [1e-3, 1e-6])
        csv_path = write_metrics_csv(test_workspace / "metrics.csv", runs)
        jsonl_path = write_metrics_jsonl(test_workspace / "metrics.jsonl", runs)
        with csv_path.open() as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == CSV_COLUMNS
        assert [float(r["eps_fill_in"]) for r in rows] == [1e-3, 1e-6]
        lines = jsonl_path.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[1])["N"] == 200



class TestResidualConsistency:
    """Tightening eps_fill_in must not make the residual worse."""

    def test_rod_sweep_is_consistent(self):
        """Rod N = 400: each 100x tighter eps_fill_in keeps the residual within 2x."""
        runs = accuracy_sweep(RunConfig(points=400), [1e-2, 1e-4, 1e-6])
        residuals = [r.eps_rel for r in runs]
        assert all(0 < r < 1 for r in residuals)
        for loose, tight in zip(residuals, residuals[1:]):
            assert tight <= 2 * loose
        assert inconsistent_residuals(runs) == []

    def test_violation_is_reported(self):
        """A residual that grows by more than the slack is reported by tolerance pair."""
        runs = [
            SimpleNamespace(eps_fill_in=1e-2, eps_rel=1e-6),
            SimpleNamespace(eps_fill_in=1e-4, eps_rel=5e-6),
            SimpleNamespace(eps_fill_in=1e-6, eps_rel=1e-8),
        ]
        assert inconsistent_residuals(runs) == [(1e-2, 1e-4)]

    def test_small_steps_are_not_compared(self):
        """Pairs less than 100x apart are outside the check."""
        runs = [SimpleNamespace(eps_fill_in=1e-3, eps_rel=1e-6), SimpleNamespace(eps_fill_in=1e-4, eps_rel=1e-3)]
        assert inconsistent_residuals(runs) == []
        assert inconsistent_residuals(runs, tighten=10.0) == [(1e-3, 1e-4)]

@pytest.mark.slow
class TestAccuracyControl:
    """The fill-in tolerance directly controls the solution accuracy."""

    def test_residual_decreases_with_eps(self):
        """Rod N = 3200: eps_fill_in 1e-3, 1e-5, 1e-7 give strictly decreasing residuals."""
        runs = accuracy_sweep(RunConfig(points=3200), [1e-3, 1e-5, 1e-7])
        residuals = [r.eps_rel for r in runs]
        assert residuals[0] > residuals[1] > residuals[2]

    def test_residual_at_reference_eps(self):
        """Rod N = 3200 at eps_fill_in 1e-4 has a residual of at most 1e-2."""
        m = run_fixture(RunConfig(points=3200, eps_fill_in=1e-4))
        assert m.eps_rel <= 1e-2


@pytest.mark.slow
class TestComplexity:
    """Empirical complexity on the rod family."""

    def test_loglog_slopes(self):
        """Solve time and memory grow at most like N^1.15, factorization time like N^1.3."""
        result = scaling_sweep(RunConfig(), [800, 1600, 3200, 6400, 12800])
        assert result.slopes["t_solve"].slope <= 1.15
        assert result.slopes["mem_factor"].slope <= 1.15
        assert result.slopes["t_factor"].slope <= 1.3
        csps = [r.csp for r in result.runs]
        assert max(csps) == min(csps)
