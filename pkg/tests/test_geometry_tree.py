"""
Unit tests for the cluster tree and the block cluster tree.
"""

import json

import numpy as np
import pytest

from h2_direct_solver.errors import InvalidInputError
from h2_direct_solver.geometry_tree import (
    Cluster,
    PointCloud,
    box_distance,
    admissible_coverage,
    build_block_tree,
    build_cluster_tree,
    fixture_points,
    is_admissible,
    tree_depth_for,
    tree_statistics,
)


def _collinear(n):
    return PointCloud.from_array(np.arange(n, dtype=float))


def _leaves_under(tree, t):
    c = tree.clusters[t]
    if c.is_leaf:
        return [t]
    return [leaf for child in c.children for leaf in _leaves_under(tree, child)]


class TestPointCloud:
    """Test point cloud validation."""

    def test_empty_cloud_rejected(self):
        """An empty point array is an input error."""
        with pytest.raises(InvalidInputError):
            PointCloud(np.zeros((0, 3)))

    def test_non_finite_rejected(self):
        """NaN coordinates are an input error."""
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(InvalidInputError):
            PointCloud(pts)

    def test_from_array_pads_coordinates(self):
        """1-D and 2-D inputs are padded with zero coordinates."""
        pc = PointCloud.from_array([[1.0, 2.0], [3.0, 4.0]])
        assert pc.points.shape == (2, 3)
        np.testing.assert_array_equal(pc.points[:, 2], 0.0)
        assert _collinear(5).n == 5


class TestClusterTree:
    """Test recursive bisection."""

    def test_exact_halving(self):
        """50 collinear points with leafsize 25 give two leaves of 25."""
        tree = build_cluster_tree(_collinear(50), 25)
        assert tree.depth == 1
        assert [tree.clusters[c].size for c in tree.leaves()] == [25, 25]

    def test_single_leaf(self):
        """A cloud no larger than leafsize is a single root leaf."""
        tree = build_cluster_tree(_collinear(25), 25)
        assert tree.depth == 0
        assert tree.leaves() == [tree.root]
        assert tree.clusters[tree.root].is_leaf

    def test_invariants_on_random_cube(self, rng):
        """Leaves respect leafsize, sit on level L, and parents are the union of their children."""
        pc = PointCloud(rng.uniform(0, 1, (1000, 3)))
        tree = build_cluster_tree(pc, 25)
        assert tree.depth == tree_depth_for(1000, 25)
        for c in tree.clusters:
            if c.is_leaf:
                assert c.size <= 25
                assert c.level == tree.depth
            else:
                c1, c2 = (tree.clusters[k] for k in c.children)
                assert c1.level == c2.level == c.level + 1
                assert c1.start == c.start and c1.stop == c2.start and c2.stop == c.stop
        root = tree.clusters[tree.root]
        assert (root.start, root.stop) == (0, 1000)
        assert sorted(tree.global_perm.tolist()) == list(range(1000))

    def test_bounding_boxes_contain_points(self, rng):
        """Every cluster's box contains its points."""
        pc = PointCloud(rng.uniform(-1, 1, (300, 3)))
        tree = build_cluster_tree(pc, 10)
        pts = tree.tree_points()
        for c in tree.clusters:
            if c.size:
                block = pts[c.start:c.stop]
                assert np.all(block >= c.bbox_min - 1e-15)
                assert np.all(block <= c.bbox_max + 1e-15)

    def test_tree_order_round_trip(self, rng):
        """from_tree_order undoes to_tree_order."""
        tree = build_cluster_tree(fixture_points("slab-2d", 120), 16)
        v = rng.standard_normal(120)
        np.testing.assert_array_equal(tree.from_tree_order(tree.to_tree_order(v)), v)

    def test_levels_list_every_cluster_once(self):
        """tree.levels partitions the clusters by their level, each level left to right."""
        tree = build_cluster_tree(fixture_points("rod-1d", 200), 25)
        assert len(tree.levels) == tree.depth + 1
        assert sorted(c for ids in tree.levels for c in ids) == list(range(len(tree.clusters)))
        for level, ids in enumerate(tree.levels):
            assert len(ids) == 2**level
            assert all(tree.clusters[c].level == level for c in ids)
            offsets = [tree.clusters[c].start for c in ids]
            assert offsets == sorted(offsets)

    def test_invalid_leafsize(self):
        """leafsize 0 is an input error."""
        with pytest.raises(InvalidInputError):
            build_cluster_tree(_collinear(10), 0)


class TestAdmissibility:
    """Test the admissibility condition."""

    def _box(self, cid, lo, hi):
        return Cluster(cid, 0, 0, 1, np.array(lo, dtype=float), np.array(hi, dtype=float))

    def test_strict_inequality(self):
        """diam == eta * dist is not admissible."""
        t = self._box(0, [0, 0, 0], [1, 0, 0])
        s = self._box(1, [2, 0, 0], [3, 0, 0])
        assert box_distance(t, s) == pytest.approx(1.0)
        assert not is_admissible(t, s, 1.0)
        assert is_admissible(t, s, 1.01)

    def test_overlapping_boxes(self):
        """Touching boxes have distance zero and are never admissible."""
        t = self._box(0, [0, 0, 0], [1, 1, 1])
        s = self._box(1, [1, 0, 0], [2, 1, 1])
        assert box_distance(t, s) == 0.0
        assert not is_admissible(t, s, 100.0)

    def test_symmetric(self, rng):
        """Swapping row and column cluster never changes the verdict."""
        for _ in range(200):
            lo_t, lo_s = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
            t = self._box(0, lo_t, lo_t + rng.uniform(0, 1, 3))
            s = self._box(1, lo_s, lo_s + rng.uniform(0, 1, 3))
            eta = rng.uniform(0.2, 3.0)
            assert is_admissible(t, s, eta) == is_admissible(s, t, eta)

    @pytest.mark.parametrize("family,n", [("rod-1d", 400), ("slab-2d", 400), ("cube-3d", 512)])
    def test_symmetric_on_tree_levels(self, family, n):
        """Every same-level cluster pair of a tree gets the same verdict both ways round."""
        tree = build_cluster_tree(fixture_points(family, n), 25)
        for ids in tree.levels:
            for a in ids:
                for b in ids:
                    t, s = tree.clusters[a], tree.clusters[b]
                    assert is_admissible(t, s, 1.0) == is_admissible(s, t, 1.0)


class TestBlockClusterTree:
    """Test the block partition."""

    @pytest.mark.parametrize("family,n", [("rod-1d", 200), ("slab-2d", 256), ("cube-3d", 343)])
    def test_partition_covers_each_leaf_pair_once(self, family, n):
        """Every leaf pair is covered by exactly one admissible ancestor pair or dense block."""
        tree = build_cluster_tree(fixture_points(family, n), 25)
        blocks = build_block_tree(tree, 1.0)
        leaves = tree.leaves()
        cover = {(a, b): 0 for a in leaves for b in leaves}
        for t, s, _ in blocks.admissible:
            for a in _leaves_under(tree, t):
                for b in _leaves_under(tree, s):
                    cover[(a, b)] += 1
        for t, s in blocks.inadmissible:
            cover[(t, s)] += 1
        assert set(cover.values()) == {1}

    def test_dense_blocks_between_leaves(self):
        """Inadmissible entries only join leaf clusters."""
        tree = build_cluster_tree(fixture_points("cube-3d", 343), 25)
        blocks = build_block_tree(tree, 1.0)
        for t, s in blocks.inadmissible:
            assert tree.clusters[t].is_leaf and tree.clusters[s].is_leaf
        assert blocks.max_csp >= 1
        assert all(c >= 1 for c in blocks.csp)

    def test_rod_l0(self):
        """A rod of 200 points first separates clusters on level 2."""
        tree = build_cluster_tree(fixture_points("rod-1d", 200), 25)
        blocks = build_block_tree(tree, 1.0)
        assert tree.depth == 3
        assert blocks.l0 == 2
        assert blocks.admissible_at(0) == []
        assert blocks.admissible_at(1) == []

    def test_no_admissible_blocks_below_leafsize(self):
        """N <= leafsize gives one dense block and no l0."""
        tree = build_cluster_tree(_collinear(20), 25)
        blocks = build_block_tree(tree, 1.0)
        assert blocks.admissible == []
        assert blocks.inadmissible == [(0, 0)]
        assert blocks.l0 is None

    @pytest.mark.parametrize("family,n", [("rod-1d", 200), ("slab-2d", 256), ("cube-3d", 343)])
    def test_partition_is_symmetric(self, family, n):
        """(t, s) is admissible exactly when (s, t) is, and likewise for dense blocks."""
        tree = build_cluster_tree(fixture_points(family, n), 25)
        blocks = build_block_tree(tree, 1.0)
        admissible = {(t, s) for t, s, _ in blocks.admissible}
        assert admissible == {(s, t) for t, s in admissible}
        assert set(blocks.inadmissible) == {(s, t) for t, s in blocks.inadmissible}

    @pytest.mark.parametrize("family,n", [("rod-1d", 400), ("slab-2d", 400), ("cube-3d", 512)])
    def test_coverage_grows_with_eta(self, family, n):
        """The far-field share of the matrix never shrinks as eta grows."""
        tree = build_cluster_tree(fixture_points(family, n), 25)
        coverage = [admissible_coverage(tree, build_block_tree(tree, eta)) for eta in (0.5, 1.0, 1.5, 2.0, 3.0)]
        assert all(0.0 <= c < 1.0 for c in coverage)
        assert all(a <= b for a, b in zip(coverage, coverage[1:]))
        assert coverage[-1] > coverage[0]

    def test_coverage_counts_entries(self):
        """Coverage plus the dense share accounts for every matrix entry."""
        tree = build_cluster_tree(fixture_points("slab-2d", 256), 25)
        blocks = build_block_tree(tree, 1.0)
        dense = sum(tree.clusters[t].size * tree.clusters[s].size for t, s in blocks.inadmissible)
        assert admissible_coverage(tree, blocks) + dense / 256 ** 2 == pytest.approx(1.0)

    def test_invalid_eta(self):
        """eta must be positive."""
        tree = build_cluster_tree(_collinear(10), 5)
        with pytest.raises(InvalidInputError):
            build_block_tree(tree, 0.0)


class TestTreeStatistics:
    """Test the summary dictionary."""

    def test_counts_match_partition(self):
        """Per-level counts add up to the block lists and the result is JSON-serializable."""
        tree = build_cluster_tree(fixture_points("rod-1d", 400), 25)
        blocks = build_block_tree(tree, 1.0)
        stats = tree_statistics(tree, blocks)
        assert stats["depth"] == tree.depth
        assert sum(row["admissible"] for row in stats["levels"]) == len(blocks.admissible)
        assert stats["levels"][-1]["near"] == len(blocks.inadmissible)
        assert stats["leaf_sizes"]["max"] <= 25
        assert stats["csp"] == blocks.max_csp
        assert stats["admissible_coverage"] == pytest.approx(admissible_coverage(tree, blocks))
        json.dumps(stats)


class TestFixturePoints:
    """Test deterministic point fixtures."""

    @pytest.mark.parametrize("family", ["rod-1d", "slab-2d", "cube-3d"])
    def test_deterministic(self, family):
        """Same seed gives the same points, a different seed different ones."""
        a = fixture_points(family, 100, seed=3)
        b = fixture_points(family, 100, seed=3)
        c = fixture_points(family, 100, seed=4)
        assert a.n == 100
        np.testing.assert_array_equal(a.points, b.points)
        assert not np.array_equal(a.points, c.points)

    def test_unknown_family(self):
        """Unknown family names are rejected."""
        with pytest.raises(InvalidInputError):
            fixture_points("sphere", 10)
