"""
Cluster tree and block cluster tree over a 3-D point cloud.

The cluster tree bisects the unknowns recursively (longest bounding-box axis,
median split) until every leaf holds at most `leafsize` points. All leaves
live on the same level L. The block cluster tree descends from the
(root, root) pair and records a block as admissible as soon as

    max(diam(t), diam(s)) < eta * dist(t, s)

holds for the bounding boxes of the two clusters. Inadmissible leaf pairs are
kept as dense blocks.

Usage:
    pc = PointCloud.from_array(points)
    tree = build_cluster_tree(pc, leafsize=25)
    blocks = build_block_tree(tree, eta=1.0)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import InvalidInputError

# Set up logging
logger = logging.getLogger(__name__)

FIXTURE_FAMILIES = ("rod-1d", "slab-2d", "cube-3d")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Points in 3-D space, in their original (input) order.

    Attributes:
        points: Array of shape (n, 3), finite float64 coordinates
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"Point cloud must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidInputError("Point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("Point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_array(cls, points: Any) -> "PointCloud":
        """Build a point cloud from an (n, d) array, d <= 3, padding missing coordinates with zeros."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] > 3:
            raise InvalidInputError(f"Cannot interpret array of shape {pts.shape} as 3-D points")
        if pts.shape[1] < 3:
            pts = np.hstack([pts, np.zeros((pts.shape[0], 3 - pts.shape[1]))])
        return cls(pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class Cluster:
    """
    A node of the cluster tree.

    The index set is the contiguous range [start, stop) of the tree ordering;
    `ClusterTree.global_perm[start:stop]` are the original point indices.
    """

    id: int
    level: int
    start: int
    stop: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    children: Tuple[int, ...] = ()
    parent: Optional[int] = None

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))


def box_distance(t: Cluster, s: Cluster) -> float:
    """Euclidean distance between the bounding boxes of two clusters."""
    gap = np.maximum(0.0, np.maximum(s.bbox_min - t.bbox_max, t.bbox_min - s.bbox_max))
    return float(np.linalg.norm(gap))


def is_admissible(t: Cluster, s: Cluster, eta: float) -> bool:
    """
    Admissibility check on bounding boxes, strict inequality.

    Args:
        t: Row cluster
        s: Column cluster (same level as t)
        eta: Admissibility parameter, > 0

    Returns:
        True if max(diam_t, diam_s) < eta * dist(t, s)
    """
    return max(t.diameter, s.diameter) < eta * box_distance(t, s)


@dataclass
class ClusterTree:
    """
    Balanced binary cluster tree.

    Attributes:
        clusters: All clusters; a cluster's id is its position in this list
        depth: Level of the leaves (L); the root is on level 0
        leafsize: Maximum number of points per leaf
        global_perm: Tree position -> original point index
        points: The point cloud the tree was built on
        levels: Cluster ids per level, left to right
    """

    clusters: List[Cluster]
    depth: int
    leafsize: int
    global_perm: np.ndarray
    points: PointCloud
    levels: List[List[int]] = field(default_factory=list)

    root: int = 0

    @property
    def n(self) -> int:
        return self.points.n

    def leaves(self) -> List[int]:
        return self.levels[self.depth]

    def to_tree_order(self, v: np.ndarray) -> np.ndarray:
        """Reorder a vector (or row-stacked matrix) from original point order into tree order."""
        return np.asarray(v)[self.global_perm]

    def from_tree_order(self, v: np.ndarray) -> np.ndarray:
        """Reorder a vector from tree order back into original point order."""
        v = np.asarray(v)
        out = np.empty_like(v)
        out[self.global_perm] = v
        return out

    def tree_points(self) -> np.ndarray:
        """Point coordinates in tree order."""
        return self.points.points[self.global_perm]


def tree_depth_for(n: int, leafsize: int) -> int:
    """Smallest L such that ceil(n / 2**L) <= leafsize."""
    depth = 0
    while math.ceil(n / 2 ** depth) > leafsize:
        depth += 1
    return depth


def build_cluster_tree(pc: PointCloud, leafsize: int) -> ClusterTree:
    """
    Build the cluster tree by recursive longest-axis median bisection.

    Args:
        pc: Point cloud (n >= 1)
        leafsize: Maximum leaf size (>= 1)

    Returns:
        ClusterTree whose leaves all sit on level L

    Raises:
        InvalidInputError: If leafsize < 1 or the point cloud is empty
    """
    if leafsize < 1:
        raise InvalidInputError(f"leafsize must be >= 1, got {leafsize}")
    if pc.n < 1:
        raise InvalidInputError("Cannot build a cluster tree over an empty point cloud")

    n = pc.n
    depth = tree_depth_for(n, leafsize)
    perm = np.arange(n)
    points = pc.points

    clusters: List[Cluster] = []
    levels: List[List[int]] = []
    # (start, stop, parent) per cluster of the level being created
    frontier: List[Tuple[int, int, Optional[int]]] = [(0, n, None)]
    children_of: Dict[int, List[int]] = {}

    for l in range(depth + 1):
        ids = []
        next_frontier = []
        for start, stop, parent in frontier:
            cid = len(clusters)
            ids.append(cid)
            if parent is not None:
                children_of.setdefault(parent, []).append(cid)

            if stop > start:
                pts = points[perm[start:stop]]
                lo, hi = pts.min(axis=0), pts.max(axis=0)
            else:
                # Empty cluster (only possible for leafsize 1): inherit the parent's box
                lo, hi = clusters[parent].bbox_min, clusters[parent].bbox_max

            clusters.append(Cluster(cid, l, start, stop, lo, hi, (), parent))

            if l < depth:
                size = stop - start
                if size > 1:
                    axis = int(np.argmax(hi - lo))
                    order = np.argsort(points[perm[start:stop], axis], kind="stable")
                    perm[start:stop] = perm[start:stop][order]
                mid = start + size // 2
                next_frontier.append((start, mid, cid))
                next_frontier.append((mid, stop, cid))
        levels.append(ids)
        frontier = next_frontier

    for cid, kids in children_of.items():
        c = clusters[cid]
        clusters[cid] = Cluster(c.id, c.level, c.start, c.stop, c.bbox_min, c.bbox_max, tuple(kids), c.parent)

    logger.info(f"Cluster tree: n={n}, leafsize={leafsize}, depth L={depth}, {len(clusters)} clusters")
    return ClusterTree(clusters, depth, leafsize, perm, pc, levels)


@dataclass
class BlockClusterTree:
    """
    Multilevel block partition of the N x N index space.

    Attributes:
        admissible: (t, s, level) for every admissible block
        inadmissible: (t, s) dense blocks, leaf clusters only
        subdivided: (t, s, level) inadmissible non-leaf pairs whose children were examined
        eta: Admissibility parameter used
        l0: Minimal level with an admissible block, None if there is none
        csp: Per level, the largest number of blocks (admissible or near-field) any cluster has
        depth: Tree depth L
    """

    admissible: List[Tuple[int, int, int]]
    inadmissible: List[Tuple[int, int]]
    subdivided: List[Tuple[int, int, int]]
    eta: float
    l0: Optional[int]
    csp: List[int]
    depth: int

    def admissible_at(self, level: int) -> List[Tuple[int, int]]:
        return [(t, s) for t, s, l in self.admissible if l == level]

    def near_at(self, level: int) -> List[Tuple[int, int]]:
        """Inadmissible pairs on a level: dense leaf blocks on level L, subdivided pairs above."""
        if level == self.depth:
            return list(self.inadmissible)
        return [(t, s) for t, s, l in self.subdivided if l == level]

    @property
    def max_csp(self) -> int:
        return max(self.csp) if self.csp else 1


def build_block_tree(tree: ClusterTree, eta: float) -> BlockClusterTree:
    """
    Build the block cluster tree by recursive descent from (root, root).

    Admissible pairs are recorded and not subdivided; inadmissible non-leaf
    pairs recurse into their four child pairs; inadmissible leaf pairs become
    dense blocks.

    Args:
        tree: Cluster tree
        eta: Admissibility parameter (> 0)

    Returns:
        BlockClusterTree
    """
    if not eta > 0:
        raise InvalidInputError(f"eta must be > 0, got {eta}")

    admissible: List[Tuple[int, int, int]] = []
    inadmissible: List[Tuple[int, int]] = []
    subdivided: List[Tuple[int, int, int]] = []

    stack = [(tree.root, tree.root)]
    while stack:
        t_id, s_id = stack.pop()
        t, s = tree.clusters[t_id], tree.clusters[s_id]
        if is_admissible(t, s, eta):
            admissible.append((t_id, s_id, t.level))
        elif t.is_leaf or s.is_leaf:
            inadmissible.append((t_id, s_id))
        else:
            subdivided.append((t_id, s_id, t.level))
            for tc in t.children:
                for sc in s.children:
                    stack.append((tc, sc))

    admissible.sort(key=lambda b: (b[2], b[0], b[1]))
    inadmissible.sort()
    subdivided.sort(key=lambda b: (b[2], b[0], b[1]))

    counts = [dict() for _ in range(tree.depth + 1)]
    for t_id, _, l in admissible:
        counts[l][t_id] = counts[l].get(t_id, 0) + 1
    for t_id, _, l in subdivided:
        counts[l][t_id] = counts[l].get(t_id, 0) + 1
    for t_id, _ in inadmissible:
        counts[tree.depth][t_id] = counts[tree.depth].get(t_id, 0) + 1
    csp = [max(c.values()) if c else 1 for c in counts]

    l0 = min((l for _, _, l in admissible), default=None)
    logger.info(
        f"Block tree: eta={eta}, {len(admissible)} admissible, {len(inadmissible)} dense, "
        f"l0={l0}, csp={csp}"
    )
    return BlockClusterTree(admissible, inadmissible, subdivided, eta, l0, csp, tree.depth)


def admissible_coverage(tree: ClusterTree, blocks: BlockClusterTree) -> float:
    """
    Fraction of the N x N matrix entries lying in admissible blocks.

    Grows monotonically with eta, unlike the number of admissible blocks: a
    larger eta lets a coarse pair become admissible and absorb its children.
    """
    covered = sum(tree.clusters[t].size * tree.clusters[s].size for t, s, _ in blocks.admissible)
    return covered / float(tree.n) ** 2


def tree_statistics(tree: ClusterTree, blocks: BlockClusterTree) -> Dict[str, Any]:
    """
    Summary of a cluster tree and its block partition, JSON-serializable.

    Args:
        tree: Cluster tree
        blocks: Block cluster tree built on it

    Returns:
        Dictionary with depth, leaf sizes, per-level block counts, csp, l0 and
        the admissible coverage
    """
    leaf_sizes = [tree.clusters[c].size for c in tree.leaves()]
    per_level = []
    for l in range(tree.depth + 1):
        per_level.append({
            "level": l,
            "clusters": len(tree.levels[l]),
            "admissible": len(blocks.admissible_at(l)),
            "near": len(blocks.near_at(l)),
            "csp": blocks.csp[l],
        })
    return {
        "n": tree.n,
        "depth": tree.depth,
        "leafsize": tree.leafsize,
        "eta": blocks.eta,
        "l0": blocks.l0,
        "leaf_sizes": {
            "min": int(min(leaf_sizes)),
            "max": int(max(leaf_sizes)),
            "mean": float(np.mean(leaf_sizes)),
        },
        "admissible_blocks": len(blocks.admissible),
        "dense_blocks": len(blocks.inadmissible),
        "admissible_coverage": admissible_coverage(tree, blocks),
        "csp": blocks.max_csp,
        "levels": per_level,
    }


def fixture_points(family: str, n: int, seed: int = 0, spacing: float = 0.01) -> PointCloud:
    """
    Deterministic point fixtures shaped like the benchmark geometries.

    Args:
        family: One of "rod-1d", "slab-2d", "cube-3d"
        n: Number of points
        seed: Seed for the coordinate jitter
        spacing: Grid spacing

    Returns:
        PointCloud with n points
    """
    if family not in FIXTURE_FAMILIES:
        raise InvalidInputError(f"Unknown fixture family '{family}', expected one of {FIXTURE_FAMILIES}")
    if n < 1:
        raise InvalidInputError(f"Fixture needs at least one point, got n={n}")

    rng = np.random.default_rng(seed)
    if family == "rod-1d":
        grid = np.zeros((n, 3))
        grid[:, 0] = np.arange(n)
        jitter = np.column_stack([
            0.25 * rng.uniform(-1, 1, n),
            0.05 * rng.uniform(-1, 1, n),
            0.05 * rng.uniform(-1, 1, n),
        ])
    elif family == "slab-2d":
        side = math.ceil(math.sqrt(n))
        ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        grid = np.column_stack([ii.ravel(), jj.ravel(), np.zeros(side * side)])[:n]
        jitter = 0.25 * rng.uniform(-1, 1, (n, 3))
        jitter[:, 2] = 0.0
    else:
        side = math.ceil(n ** (1.0 / 3.0) - 1e-9)
        while side ** 3 < n:
            side += 1
        ii, jj, kk = np.meshgrid(np.arange(side), np.arange(side), np.arange(side), indexing="ij")
        grid = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])[:n].astype(np.float64)
        jitter = 0.25 * rng.uniform(-1, 1, (n, 3))

    return PointCloud((grid + 0.5 + jitter) * spacing)
