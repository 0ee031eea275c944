"""DBSCAN over a uniform hash grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

# cells of side eps / sqrt(3) can hold eps-neighbours up to two cells away;
# half the offsets cover every unordered cell pair, nearest first
_OFFSETS = sorted(((a, b, c) for a in range(-2, 3) for b in range(-2, 3) for c in range(-2, 3)
                   if (a, b, c) > (0, 0, 0)), key=lambda o: (o[0] ** 2 + o[1] ** 2 + o[2] ** 2, o))
# node pairs with at most this many point pairs are tested in bulk
_SMALL_PAIR = 64


@dataclass
class ClusterSet:
    labels: np.ndarray  # -1 noise, else 0..k-1
    k: int
    core: np.ndarray  # bool per point

    def members(self, cid: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cid)


def _cell_keys(points: np.ndarray, size: float) -> np.ndarray:
    keys = np.floor(points / size).astype(np.int64)
    keys -= keys.min(axis=0) - 2  # pad so neighbour offsets never wrap
    return keys


def dbscan(points, eps: float = 0.8, min_pts: int = 5) -> ClusterSet:
    """Density-based clustering.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Cluster ids are assigned in ascending order of each
    cluster's lowest-index core point; a border point joins the lowest-id
    cluster among its core neighbours, which is what a sequential scan in
    ascending index order produces.

    Points are bucketed in a hash grid of cell side eps / sqrt(3), so any
    two points sharing a cell are neighbours. A cell holding min_pts
    points makes all of them core, and core points of one cell always
    belong to one cluster; only cell-to-cell links need distance checks.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ClusterSet(labels, 0, np.zeros(0, dtype=bool))
    side = eps / np.sqrt(3.0) * (1 - 1e-12)
    keys = _cell_keys(pts, side)
    span = keys.max(axis=0) + 3
    lin = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    cells, cell_of, cell_n = np.unique(lin, return_inverse=True, return_counts=True)
    tree = cKDTree(pts)
    core = cell_n[cell_of] >= min_pts
    sparse = np.flatnonzero(~core)
    if len(sparse):
        core[sparse] = tree.query_ball_point(pts[sparse], eps, return_length=True) >= min_pts
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return ClusterSet(labels, 0, core)

    # one node per grid cell holding core points
    node_cells, node_of = np.unique(cell_of[core_idx], return_inverse=True)
    m = len(node_cells)
    node_keys = cells[node_cells]
    bounds = np.cumsum(np.bincount(node_of, minlength=m))[:-1]
    members = np.split(core_idx[np.argsort(node_of, kind="stable")], bounds)
    sizes = np.array([len(x) for x in members])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(members)
    # candidate node pairs over the half-neighbourhood
    pa, pb = [], []
    for off in _OFFSETS:
        delta = (off[0] * span[1] + off[1]) * span[2] + off[2]
        pos = np.minimum(np.searchsorted(node_keys, node_keys + delta), m - 1)
        a = np.flatnonzero(node_keys[pos] == node_keys + delta)
        pa.append(a)
        pb.append(pos[a])
    pa, pb = np.concatenate(pa), np.concatenate(pb)
    work = sizes[pa] * sizes[pb]
    small = work <= _SMALL_PAIR

    # small pairs: all cross distances at once
    sa, sb = pa[small], pb[small]
    w = work[small]
    pair = np.repeat(np.arange(len(sa)), w)
    off_in = np.arange(len(pair)) - np.repeat(np.cumsum(w) - w, w)
    ia = flat[starts[sa][pair] + off_in // sizes[sb][pair]]
    ib = flat[starts[sb][pair] + off_in % sizes[sb][pair]]
    close = np.sum((pts[ia] - pts[ib]) ** 2, axis=1) <= eps * eps
    hit = np.zeros(len(sa), dtype=bool)
    hit[pair[close]] = True
    graph = coo_matrix((np.ones(int(hit.sum())), (sa[hit], sb[hit])), shape=(m, m))
    _, comp0 = connected_components(graph, directed=False)
    # union-find seeded with those components, root = lowest node
    lowest = np.full(m, m)
    np.minimum.at(lowest, comp0, np.arange(m))
    parent = lowest[comp0]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    trees: dict[int, cKDTree] = {}
    bound = np.nextafter(eps, np.inf)

    def linked(a, b):
        if len(members[a]) > len(members[b]):
            a, b = b, a
        if b not in trees:
            trees[b] = cKDTree(pts[members[b]])
        # the query bound is strict; eps-neighbourhoods are closed
        d, _ = trees[b].query(pts[members[a]], k=1, distance_upper_bound=bound)
        return bool(np.any(d <= eps))

    for a, b in zip(pa[~small].tolist(), pb[~small].tolist()):
        ra, rb = find(a), find(b)
        if ra != rb and linked(a, b):
            parent[max(ra, rb)] = min(ra, rb)
    roots = parent
    while True:  # pointer jumping; parent[i] <= i throughout
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            break
        roots = nxt
    comp = roots[node_of]
    # number clusters by their lowest core index (core_idx is ascending)
    first = np.full(m, n)
    np.minimum.at(first, comp, core_idx)
    used = np.flatnonzero(first < n)
    rank = np.full(m, -1, dtype=np.int64)
    rank[used[np.argsort(first[used])]] = np.arange(len(used))
    labels[core_idx] = rank[comp]
    k = len(used)
    # border points: lowest cluster id among core neighbours
    rest = np.flatnonzero(~core)
    if len(rest):
        ctree = cKDTree(pts[core_idx])
        for i, nb in zip(rest.tolist(), ctree.query_ball_point(pts[rest], eps)):
            if nb:
                labels[i] = int(labels[core_idx[nb]].min())
    return ClusterSet(labels, k, core)
