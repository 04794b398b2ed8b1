"""Louvain community detection and client-dataset construction.

The partitioner mirrors the usual federated-graph data protocol: detect
communities, keep the k largest, and treat each one as an isolated client
graph (cross-community edges are dropped). Per-client splits shuffle the
labeled nodes with a per-client seeded generator and cut them by ratio,
remainders going to test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .graphcore import Graph, NodeSplit, UNLABELED
from .numcore import Array, SparseAdj

PASS_TOLERANCE = 1e-7


@dataclass
class CommunityAssignment:
    """Dense community ids, one per node."""

    membership: Array
    num_communities: int

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=np.int64)
        present = np.unique(self.membership)
        if present.size and (present.min() < 0 or present.max() >= self.num_communities):
            raise ConfigError("community ids must be dense in [0, num_communities)")


@dataclass
class ClientDataset:
    """One client's private graph plus its node split."""

    client_id: int
    graph: Graph
    split: NodeSplit
    original_ids: Array  # local index -> node id in the source graph


class _LevelGraph:
    """Weighted working graph for one Louvain level.

    ``nbrs[u]`` maps neighbor -> weight (symmetric, no diagonal); ``self_w``
    holds self-loop weight counted as an ordered-pair sum, so ``k[u]`` is the
    full (ordered) incident weight and ``two_m == sum(k)``.
    """

    def __init__(self, nbrs, self_w):
        self.nbrs = nbrs
        self.self_w = np.asarray(self_w, dtype=np.float64)
        self.n = len(nbrs)
        self.k = np.array([sum(d.values()) for d in nbrs]) + self.self_w
        self.two_m = float(self.k.sum())

    @classmethod
    def from_graph(cls, graph: Graph) -> "_LevelGraph":
        nbrs = [dict() for _ in range(graph.n)]
        adj = graph.adj
        for u in range(graph.n):
            for idx in range(adj.indptr[u], adj.indptr[u + 1]):
                nbrs[u][int(adj.indices[idx])] = float(adj.weights[idx])
        return cls(nbrs, np.zeros(graph.n))


def _move_nodes(level: _LevelGraph, rng: np.random.Generator) -> Array:
    """Greedy local moves until a full sweep makes no change.

    Each node joins the candidate community with the best modularity gain;
    equal gains break toward the lowest community id.
    """
    n = level.n
    comm = np.arange(n, dtype=np.int64)
    tot = level.k.copy()
    inv_two_m = 1.0 / level.two_m
    order = np.arange(n)
    rng.shuffle(order)
    moved = True
    while moved:
        moved = False
        for u in order:
            u = int(u)
            old = int(comm[u])
            # weight from u to each adjacent community
            w_to: dict[int, float] = {}
            for v, w in level.nbrs[u].items():
                c = int(comm[v])
                w_to[c] = w_to.get(c, 0.0) + w
            tot[old] -= level.k[u]
            best_c, best_gain = old, _insert_gain(level, u, w_to.get(old, 0.0),
                                                  tot[old], inv_two_m)
            for c in sorted(w_to):
                if c == old:
                    continue
                gain = _insert_gain(level, u, w_to[c], tot[c], inv_two_m)
                if gain > best_gain + 1e-15 or (abs(gain - best_gain) <= 1e-15 and c < best_c):
                    best_c, best_gain = c, gain
            tot[best_c] += level.k[u]
            if best_c != old:
                comm[u] = best_c
                moved = True
    return comm


def _insert_gain(level, u, w_to_c, tot_c, inv_two_m):
    # modularity gain of attaching isolated node u to community c
    return 2.0 * w_to_c * inv_two_m - 2.0 * tot_c * level.k[u] * inv_two_m * inv_two_m


def _compress(comm: Array) -> tuple[Array, int]:
    """Relabel community ids densely by first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(comm)
    for i, c in enumerate(comm):
        c = int(c)
        if c not in mapping:
            mapping[c] = len(mapping)
        out[i] = mapping[c]
    return out, len(mapping)


def _coarsen(level: _LevelGraph, comm: Array, count: int) -> _LevelGraph:
    nbrs = [dict() for _ in range(count)]
    self_w = np.zeros(count)
    for u in range(level.n):
        cu = int(comm[u])
        self_w[cu] += level.self_w[u]
        for v, w in level.nbrs[u].items():
            cv = int(comm[v])
            if cu == cv:
                self_w[cu] += w  # ordered sum: (u,v) and (v,u) both visit
            else:
                nbrs[cu][cv] = nbrs[cu].get(cv, 0.0) + w
    return _LevelGraph(nbrs, self_w)


def _level_modularity(level: _LevelGraph, comm: Array) -> float:
    count = int(comm.max()) + 1 if comm.size else 0
    inside = np.zeros(count)
    tot = np.zeros(count)
    for u in range(level.n):
        c = int(comm[u])
        tot[c] += level.k[u]
        inside[c] += level.self_w[u]
        for v, w in level.nbrs[u].items():
            if int(comm[v]) == c:
                inside[c] += w
    two_m = level.two_m
    return float(np.sum(inside / two_m - (tot / two_m) ** 2))


def louvain(graph: Graph, seed: int) -> CommunityAssignment:
    """Two-level Louvain loop: local moves, coarsen, repeat.

    Stops when a pass improves modularity by no more than 1e-7. The node
    visit order is shuffled by ``seed``, so results are deterministic per
    seed. Raises on edgeless graphs.
    """
    if graph.adj.nnz == 0:
        raise DegenerateInputError("Louvain requires at least one edge")
    rng = np.random.default_rng(seed)
    level = _LevelGraph.from_graph(graph)
    membership = np.arange(graph.n, dtype=np.int64)  # singleton start
    q_prev = _level_modularity(level, membership)
    while True:
        comm = _move_nodes(level, rng)
        comm, count = _compress(comm)
        q_new = _level_modularity(level, comm)
        if q_new < q_prev - 1e-12:
            raise AssertionError("modularity decreased across a Louvain pass")
        membership = comm[membership]
        if q_new - q_prev <= PASS_TOLERANCE or count == level.n:
            break
        level = _coarsen(level, comm, count)
        q_prev = q_new
    dense, count = _compress(membership)
    return CommunityAssignment(membership=dense, num_communities=count)


def modularity(graph: Graph, assignment: CommunityAssignment) -> float:
    """Q = sum_c [in_c/(2m) - (tot_c/(2m))^2] with m the edge count."""
    comm = assignment.membership
    if comm.shape != (graph.n,):
        raise ConfigError("assignment length must equal node count")
    m = graph.adj.nnz / 2.0
    if m == 0:
        return 0.0
    count = assignment.num_communities
    inside = np.zeros(count)
    tot = np.zeros(count)
    adj = graph.adj
    for u in range(graph.n):
        cu = int(comm[u])
        for idx in range(adj.indptr[u], adj.indptr[u + 1]):
            v = int(adj.indices[idx])
            w = float(adj.weights[idx])
            tot[cu] += w
            if int(comm[v]) == cu:
                inside[cu] += w
    two_m = 2.0 * m
    return float(np.sum(inside / two_m - (tot / two_m) ** 2))


def induced_subgraph(graph: Graph, nodes: Array) -> tuple[Graph, Array]:
    """Subgraph on ``nodes`` (sorted), keeping only internal edges."""
    nodes = np.asarray(sorted(int(v) for v in nodes), dtype=np.int64)
    local_of = {int(v): i for i, v in enumerate(nodes)}
    edges = []
    for u in nodes:
        for v in graph.adj.neighbors(int(u)):
            v = int(v)
            if u < v and v in local_of:
                edges.append((local_of[int(u)], local_of[v]))
    adj = SparseAdj.from_edges(len(nodes), np.array(edges, dtype=np.int64).reshape(-1, 2))
    sub = Graph(adj=adj, features=graph.features[nodes].copy(),
                labels=graph.labels[nodes].copy(), num_classes=graph.num_classes)
    return sub, nodes


def split_labeled_nodes(labels: Array, ratios: tuple[float, float, float],
                        rng: np.random.Generator) -> NodeSplit:
    """Shuffle labeled nodes and cut train/val by floor(ratio); rest is test."""
    r_train, r_val, r_test = ratios
    if min(r_train, r_val, r_test) < 0 or r_train + r_val + r_test > 1.0 + 1e-9:
        raise ConfigError("split ratios must be non-negative and sum to at most 1")
    labeled = np.flatnonzero(labels != UNLABELED)
    perm = labeled[rng.permutation(labeled.size)]
    n_train = int(np.floor(r_train * labeled.size))
    n_val = int(np.floor(r_val * labeled.size))
    return NodeSplit(train=perm[:n_train], val=perm[n_train:n_train + n_val],
                     test=perm[n_train + n_val:])


def make_clients(graph: Graph, assignment: CommunityAssignment, k: int,
                 split_ratios: tuple[float, float, float] = (0.4, 0.3, 0.3),
                 seed: int = 0) -> list[ClientDataset]:
    """Turn the k largest communities into isolated client datasets.

    Size ties break toward the lower community id. Client i is the i-th
    largest community; its labeled nodes are split per ``split_ratios``.
    """
    if k < 1 or k > assignment.num_communities:
        raise ConfigError(
            f"requested {k} clients but only {assignment.num_communities} communities exist")
    sizes = np.bincount(assignment.membership, minlength=assignment.num_communities)
    order = sorted(range(assignment.num_communities), key=lambda c: (-sizes[c], c))
    seeds = np.random.SeedSequence(seed).spawn(k)
    clients = []
    for i, comm_id in enumerate(order[:k]):
        nodes = np.flatnonzero(assignment.membership == comm_id)
        sub, original = induced_subgraph(graph, nodes)
        rng = np.random.default_rng(seeds[i])
        split = split_labeled_nodes(sub.labels, split_ratios, rng)
        clients.append(ClientDataset(client_id=i, graph=sub, split=split,
                                     original_ids=original))
    return clients
