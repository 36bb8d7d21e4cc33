"""Capacity-constrained K-means and the bi-level (inter/intra cluster) neighbor maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import AttributedGraph, canonical_edges


@dataclass(frozen=True)
class ClusterAssignment:
    """Balanced partition of the nodes.

    ``index_in_cluster[i]`` is the rank of node ``i`` among the members of its
    cluster when those are ordered by global node id.
    """

    k: int
    capacity: int
    cluster_of: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.cluster_of.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.k)

    @property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.cluster_of, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    @property
    def index_in_cluster(self) -> np.ndarray:
        idx = np.empty(self.n_nodes, dtype=np.int64)
        for mem in self.members:
            idx[mem] = np.arange(len(mem))
        return idx

    def member_table(self) -> np.ndarray:
        """``(k, capacity)`` table of global node ids, ``-1`` past each cluster's size."""
        table = np.full((self.k, self.capacity), -1, dtype=np.int64)
        for c, mem in enumerate(self.members):
            table[c, : len(mem)] = mem
        return table


def _greedy_capacity_assign(dist: np.ndarray, capacity: int) -> np.ndarray:
    n, k = dist.shape
    # ties: smaller distance, then lower node id, then lower cluster id
    order = np.lexsort((np.tile(np.arange(k), n), np.repeat(np.arange(n), k), dist.ravel()))
    assign = [-1] * n
    fill = [0] * k
    left = n
    for flat in order.tolist():
        i, c = divmod(flat, k)
        if assign[i] < 0 and fill[c] < capacity:
            assign[i] = c
            fill[c] += 1
            left -= 1
            if left == 0:
                break
    return np.array(assign, dtype=np.int64)


def _fill_empty(assign: np.ndarray, dist: np.ndarray, k: int) -> np.ndarray:
    assign = assign.copy()
    for c in range(k):
        if np.any(assign == c):
            continue
        sizes = np.bincount(assign, minlength=k)
        own = dist[np.arange(len(assign)), assign]
        # only points whose cluster keeps at least one member may move
        own = np.where(sizes[assign] > 1, own, -np.inf)
        assign[int(np.argmax(own))] = c
    return assign


def _sq_dist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dist(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = rng.integers(n)
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers.append(x[pick])
        closest = np.minimum(closest, _sq_dist(x, x[pick][None, :])[:, 0])
    return np.array(centers)


def balanced_kmeans(
    x: np.ndarray,
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    n_init: int = 4,
    normalize: bool = False,
) -> ClusterAssignment:
    """Lloyd iterations with a hard per-cluster capacity of ``ceil(N / k)``.

    Each assignment step fills clusters greedily in ascending order of
    point-to-centroid distance, skipping clusters that are already full.
    Of ``n_init`` k-means++ starts the one with the lowest within-cluster
    sum of squares is kept.  ``normalize`` L2-normalizes rows first.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    capacity = math.ceil(n / k)
    rng = np.random.default_rng(seed)

    best, best_sse = None, np.inf
    for _ in range(max(1, n_init)):
        centers = _kmeanspp(x, k, rng)
        assign = None
        for _ in range(max(1, max_iters)):
            dist = _sq_dist(x, centers)
            new = _fill_empty(_greedy_capacity_assign(dist, capacity), dist, k)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            sums = np.zeros((k, x.shape[1]))
            np.add.at(sums, assign, x)
            centers = sums / np.bincount(assign, minlength=k)[:, None]
        sse = float(((x - centers[assign]) ** 2).sum())
        if sse < best_sse - 1e-12:
            best, best_sse = assign, sse
    return ClusterAssignment(k=k, capacity=capacity, cluster_of=best)


@dataclass(frozen=True)
class NeighborMaps:
    """Inter-cluster map ``inter`` (N x K bool) and the non-empty intra rows.

    ``pairs[p] = (i, k)`` lists every ``(node, cluster)`` with ``inter[i, k]``
    set, sorted; ``intra[p]`` is the matching length-``capacity`` bit row.
    """

    inter: np.ndarray
    pairs: np.ndarray
    intra: np.ndarray

    def intra_row(self, i: int, k: int) -> np.ndarray:
        key = np.searchsorted(self._keys, i * self.inter.shape[1] + k)
        if key < len(self._keys) and self._keys[key] == i * self.inter.shape[1] + k:
            return self.intra[key]
        return np.zeros(self.intra.shape[1], dtype=bool)

    @property
    def _keys(self) -> np.ndarray:
        return self.pairs[:, 0] * self.inter.shape[1] + self.pairs[:, 1]

    def dense_intra(self) -> np.ndarray:
        """Full ``N x K x capacity`` tensor; only for small graphs."""
        n, k = self.inter.shape
        m = np.zeros((n, k, self.intra.shape[1]), dtype=bool)
        m[self.pairs[:, 0], self.pairs[:, 1]] = self.intra
        return m


def build_neighbor_maps(g: AttributedGraph, c: ClusterAssignment) -> NeighborMaps:
    if c.n_nodes != g.n_nodes:
        raise ValueError("cluster assignment does not cover the graph")
    return _maps_from_directed(
        np.concatenate([g.edges[:, 0], g.edges[:, 1]]),
        np.concatenate([g.edges[:, 1], g.edges[:, 0]]),
        c,
    )


def _maps_from_directed(src, dst, c: ClusterAssignment) -> NeighborMaps:
    n, k = c.n_nodes, c.k
    inter = np.zeros((n, k), dtype=bool)
    kc = c.cluster_of[dst]
    inter[src, kc] = True
    keys = src * k + kc
    uniq, inv = np.unique(keys, return_inverse=True)
    intra = np.zeros((len(uniq), c.capacity), dtype=bool)
    intra[inv, c.index_in_cluster[dst]] = True
    pairs = np.stack([uniq // k, uniq % k], axis=1).astype(np.int64)
    return NeighborMaps(inter=inter, pairs=pairs, intra=intra)


def neighbor_maps_to_adjacency(nm: NeighborMaps, c: ClusterAssignment) -> np.ndarray:
    """Recover the canonical edge array encoded by ``nm``."""
    table = c.member_table()
    if not np.array_equal(nm.inter[nm.pairs[:, 0], nm.pairs[:, 1]], np.ones(len(nm.pairs), bool)):
        raise ValueError("intra row stored for a cluster not flagged in the inter map")
    p, m = np.nonzero(nm.intra)
    i, kk = nm.pairs[p, 0], nm.pairs[p, 1]
    j = table[kk, m]
    if np.any(j < 0):
        raise ValueError("intra bit set beyond the cluster size")
    covered = np.zeros_like(nm.inter)
    covered[i, kk] = True
    if not np.array_equal(covered, nm.inter):
        raise ValueError("inter map flags a cluster with no intra bit")
    if len(i) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return canonical_edges(np.stack([i, j], axis=1), c.n_nodes)
