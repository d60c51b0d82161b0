"""
Shared pytest fixtures for the H² direct solver tests.
"""
import os
import shutil

import numpy as np
import pytest

from h2_direct_solver.geometry_tree import build_block_tree, build_cluster_tree, fixture_points
from h2_direct_solver.h2_construct import build_h2
from h2_direct_solver.kernels import KernelSpec

HELMHOLTZ_WAVENUMBER = 10.0


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def laplace_kernel():
    """Laplace kernel with a dominant (scaled) diagonal."""
    return KernelSpec.laplace(diagonal_shift=1.0, scale_diagonal=True)


@pytest.fixture(scope="session")
def helmholtz_kernel():
    """Helmholtz kernel with a few wavelengths across the larger fixtures."""
    return KernelSpec.helmholtz(HELMHOLTZ_WAVENUMBER, diagonal_shift=1.0, scale_diagonal=True)


@pytest.fixture(scope="session")
def make_h2():
    """
    Factory for H²-matrices over point fixtures, cached per parameter set.

    The returned matrices are shared between tests and must not be mutated.
    """
    cache = {}

    def _make(kernel, n, family="rod-1d", leafsize=25, eta=1.0, eps_h2=1e-6, seed=0, real_bases=True):
        key = (kernel, n, family, leafsize, eta, eps_h2, seed, real_bases)
        if key not in cache:
            pc = fixture_points(family, n, seed=seed)
            tree = build_cluster_tree(pc, leafsize)
            blocks = build_block_tree(tree, eta)
            cache[key] = build_h2(kernel, tree, blocks, eps_h2, real_bases=real_bases)
        return cache[key]

    return _make


@pytest.fixture
def laplace_h2(make_h2, laplace_kernel):
    """Laplace H²-matrix on a rod of 200 points (depth 3, l0 = 2)."""
    return make_h2(laplace_kernel, 200)


@pytest.fixture
def helmholtz_h2(make_h2, helmholtz_kernel):
    """Helmholtz H²-matrix on a rod of 200 points."""
    return make_h2(helmholtz_kernel, 200)


@pytest.fixture
def test_workspace(tmp_path):
    """
    Creates a temporary workspace directory for file round-trips.
    Automatically cleaned up after test completion.
    """
    workspace = tmp_path / "test_workspace"
    workspace.mkdir(exist_ok=True)

    # Change to the test workspace for the duration of the test
    original_dir = os.getcwd()
    os.chdir(workspace)

    yield workspace

    # Restore original directory and cleanup
    os.chdir(original_dir)
    if workspace.exists():
        shutil.rmtree(workspace, ignore_errors=True)
