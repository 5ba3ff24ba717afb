"""Sparse graphs, exact hop-k adjacency, induced subgraphs and seed batching."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph in CSR form with node features and labels.

    Both directions of every edge are stored. Use :meth:`from_edges` to build
    one from a raw edge list; the constructor only validates.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = len(self.indptr) - 1
        if n < 0:
            raise ValidationError("indptr must have at least one entry")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError(
                f"feature matrix has {self.features.shape[0]} rows, expected {n}")
        if self.labels.shape != (n,):
            raise ValidationError(f"expected {n} labels, got {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValidationError("edge endpoint out of range")
        a = self.adjacency
        if a.diagonal().any():
            raise ValidationError("self-loops are not allowed")
        if (a != a.T).nnz:
            raise ValidationError("adjacency must be symmetric")
        if len(self.indices) > 1:
            bad = np.diff(self.indices) <= 0
            starts = self.indptr[1:-1]
            bad[starts[(starts > 0) & (starts < len(self.indices))] - 1] = False
            if bad.any():
                raise ValidationError("rows must be sorted without duplicate edges")

    @classmethod
    def from_edges(cls, n, edges, features, labels, num_classes=None):
        """Build a graph, symmetrizing and dropping self-loops and duplicates."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError(f"edge endpoint out of range for n={n}")
        loops = edges[:, 0] == edges[:, 1]
        if loops.any():
            log.info("dropped %d self-loops", int(loops.sum()))
        edges = edges[~loops]
        both = np.concatenate([edges, edges[:, ::-1]])
        a = sp.csr_matrix(
            (np.ones(len(both), dtype=np.int8), (both[:, 0], both[:, 1])), shape=(n, n))
        a.sum_duplicates()
        a.sort_indices()
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if len(labels) else 1
        return cls(
            indptr=a.indptr.astype(np.int64),
            indices=a.indices.astype(np.int64),
            features=np.asarray(features, dtype=np.float64),
            labels=labels,
            num_classes=int(num_classes),
        )

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n
        return sp.csr_matrix(
            (np.ones(len(self.indices), dtype=bool), self.indices, self.indptr), shape=(n, n))

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (e, 2) array with u < v, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        pairs = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


@dataclass(frozen=True, eq=False)
class HopAdjacency:
    """Boolean matrices ``mats[k-1]`` marking pairs at shortest distance exactly k."""

    max_hop: int
    mats: list

    def __getitem__(self, k: int) -> sp.csr_matrix:
        """Hop-k matrix, 1-based."""
        if not 1 <= k <= self.max_hop:
            raise IndexError(k)
        return self.mats[k - 1]

    def same_as(self, other: "HopAdjacency") -> bool:
        if self.max_hop != other.max_hop:
            return False
        return all(
            a.shape == b.shape and (a != b).nnz == 0 for a, b in zip(self.mats, other.mats))


def _check_hop(max_hop):
    if int(max_hop) != max_hop or max_hop < 1:
        raise InvalidArgument(f"max_hop must be a positive integer, got {max_hop}")


def hop_adjacency(g: Graph, max_hop: int) -> HopAdjacency:
    """Exact hop-k adjacency for k = 1..max_hop.

    All sources are expanded together one BFS level at a time: the next
    frontier is the current frontier times A, binarized, minus everything
    already reached. Cost is proportional to the size of the max_hop balls.
    """
    _check_hop(max_hop)
    n = g.n
    a = g.adjacency.astype(np.int32)
    reached = sp.identity(n, dtype=np.int32, format="csr")
    frontier = reached
    mats = []
    for _ in range(max_hop):
        nxt = (frontier @ a).tocsr()
        nxt.data[:] = 1
        nxt = (nxt - nxt.multiply(reached)).tocsr()
        nxt.eliminate_zeros()
        nxt.sort_indices()
        mats.append(nxt.astype(bool))
        reached = (reached + nxt).tocsr()
        frontier = nxt
    return HopAdjacency(max_hop, mats)


def bfs_distance_oracle(g: Graph, max_hop: int) -> HopAdjacency:
    """Reference hop matrices from a dense all-pairs BFS distance table.

    Deliberately naive; only used to cross-check :func:`hop_adjacency`.
    """
    _check_hop(max_hop)
    n = g.n
    dist = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if dist[src, v] < 0:
                    dist[src, v] = dist[src, u] + 1
                    queue.append(v)
    mats = [sp.csr_matrix(dist == k) for k in range(1, max_hop + 1)]
    return HopAdjacency(max_hop, mats)


def induce_subgraph(g: Graph, nodes) -> tuple[Graph, dict[int, int]]:
    """Subgraph on ``nodes`` (sorted global ids) and the global-to-local map."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= g.n):
        raise InvalidArgument("node id out of range")
    if np.any(np.diff(nodes) <= 0):
        raise InvalidArgument("nodes must be sorted and deduplicated")
    sub = g.adjacency[nodes][:, nodes].tocsr()
    sub.sort_indices()
    subgraph = Graph(
        indptr=sub.indptr.astype(np.int64),
        indices=sub.indices.astype(np.int64),
        features=g.features[nodes],
        labels=g.labels[nodes],
        num_classes=g.num_classes,
    )
    return subgraph, {int(v): i for i, v in enumerate(nodes)}


def expand_neighborhood(g: Graph, seeds, depth: int) -> np.ndarray:
    """Sorted ids of every node within ``depth`` hops of any seed."""
    reached = np.zeros(g.n, dtype=bool)
    reached[np.asarray(seeds, dtype=np.int64)] = True
    a = g.adjacency
    frontier = reached.copy()
    for _ in range(depth):
        if not frontier.any():
            break
        hit = (a @ frontier) & ~reached
        reached |= hit
        frontier = hit
    return np.flatnonzero(reached)


@dataclass(frozen=True, eq=False)
class Batch:
    seeds: np.ndarray
    members: np.ndarray
    local_index: dict
    sub_hops: HopAdjacency
    # foreign batch index -> local positions of that batch's seeds found here
    cross_occurrences: dict
    seed_local: np.ndarray


@dataclass(frozen=True, eq=False)
class BatchSet:
    num_nodes: int
    max_hop: int
    batches: list
    home: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def __getitem__(self, i) -> Batch:
        return self.batches[i]


def build_batchset(g: Graph, seed_groups, max_hop: int) -> BatchSet:
    """Expand each seed group to its closed ``max_hop`` ball and index it."""
    _check_hop(max_hop)
    home = np.full(g.n, -1, dtype=np.int64)
    groups = [np.sort(np.asarray(s, dtype=np.int64)) for s in seed_groups]
    for i, seeds in enumerate(groups):
        if np.any(home[seeds] >= 0):
            raise InvalidArgument("seed groups overlap")
        home[seeds] = i
    if np.any(home < 0):
        raise InvalidArgument("seed groups do not cover every node")

    batches = []
    for i, seeds in enumerate(groups):
        members = expand_neighborhood(g, seeds, max_hop)
        sub, local_index = induce_subgraph(g, members)
        owners = home[members]
        cross = {}
        for j in np.unique(owners):
            if j != i:
                cross[int(j)] = np.flatnonzero(owners == j)
        batches.append(Batch(
            seeds=seeds,
            members=members,
            local_index=local_index,
            sub_hops=hop_adjacency(sub, max_hop),
            cross_occurrences=cross,
            seed_local=np.flatnonzero(owners == i),
        ))
    return BatchSet(g.n, max_hop, batches, home)


def partition_batches(g: Graph, batch_size: int, max_hop: int, rng) -> BatchSet:
    """Shuffle the nodes and cut them into chunks of ``batch_size`` seeds."""
    if not 1 <= batch_size <= g.n:
        raise InvalidArgument(f"batch_size must lie in [1, {g.n}], got {batch_size}")
    order = np.asarray(rng.permutation(g.n), dtype=np.int64)
    groups = [order[s:s + batch_size] for s in range(0, g.n, batch_size)]
    return build_batchset(g, groups, max_hop)


def split_into_batches(g: Graph, num_batches: int, max_hop: int, rng) -> BatchSet:
    """Shuffle the nodes and split them into ``num_batches`` near-equal seed sets."""
    if not 1 <= num_batches <= g.n:
        raise InvalidArgument(f"num_batches must lie in [1, {g.n}], got {num_batches}")
    order = np.asarray(rng.permutation(g.n), dtype=np.int64)
    return build_batchset(g, np.array_split(order, num_batches), max_hop)
