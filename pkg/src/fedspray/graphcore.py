"""Graph storage, label/split bookkeeping, homophily, and the on-disk format.

Graphs are undirected and unweighted (stored weight 1), with dense float
features, integer labels (-1 marks an unlabeled node), and no self-loops.
Self-loops appear only inside normalized adjacencies.

File formats (text, UTF-8):

* graph file::

    graph <n> <d_x> <d_c>
    node <id> <label|-> <f_1> ... <f_dx>     (n lines, ids 0..n-1 in order)
    edge <u> <v>                             (u < v, each undirected edge once)

  Edge lines listing both orientations of every pair are also accepted; a
  reversed line (u > v) without its mirror is rejected as asymmetric.

* split file: lines ``split <id> <train|val|test>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    EmptyInputError,
    ParseError,
    UndefinedHomophilyError,
    ValidationError,
)
from .numcore import Array, SparseAdj

UNLABELED = -1


@dataclass
class Graph:
    """Undirected attributed graph with optional per-node labels."""

    adj: SparseAdj
    features: Array
    labels: Array  # int64, UNLABELED where missing
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.adj.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError(f"feature matrix must have {n} rows")
        if self.labels.shape != (n,):
            raise ValidationError(f"labels must be a length-{n} vector")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be at least 1")
        lab = self.labels[self.labels != UNLABELED]
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValidationError("node label out of class range")
        rows = np.repeat(np.arange(n), np.diff(self.adj.indptr))
        if np.any(rows == self.adj.indices):
            raise ValidationError("stored adjacency must not contain self-loops")

    @property
    def n(self) -> int:
        return self.adj.n

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def labeled_nodes(self) -> Array:
        return np.flatnonzero(self.labels != UNLABELED)

    def degrees(self) -> Array:
        return self.adj.degrees()


@dataclass
class NodeSplit:
    """Disjoint train/validation/test node-index sets."""

    train: Array
    val: Array
    test: Array

    def __post_init__(self):
        self.train = np.asarray(sorted(self.train), dtype=np.int64)
        self.val = np.asarray(sorted(self.val), dtype=np.int64)
        self.test = np.asarray(sorted(self.test), dtype=np.int64)
        parts = [set(self.train), set(self.val), set(self.test)]
        total = len(parts[0]) + len(parts[1]) + len(parts[2])
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ValidationError("split parts must be pairwise disjoint")

    def all_nodes(self) -> Array:
        return np.concatenate([self.train, self.val, self.test])


@dataclass
class ClientStats:
    """Per-client class census and homophily summary."""

    class_counts: Array
    majority_class: int
    majority_homophily: float | None
    minority_homophily: float | None
    per_class_homophily: list = field(default_factory=list)


def validate_split(graph: Graph, split: NodeSplit) -> None:
    labeled = set(graph.labeled_nodes().tolist())
    for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        if part.size and (part.min() < 0 or part.max() >= graph.n):
            raise ValidationError(f"{name} split references a missing node")
        if not set(part.tolist()) <= labeled:
            raise ValidationError(f"{name} split contains unlabeled nodes")


def node_homophily(graph: Graph, v: int) -> float:
    """Fraction of v's neighbors sharing v's label.

    Requires v and all of its neighbors to be labeled, and degree(v) > 0.
    """
    if not 0 <= v < graph.n:
        raise ContractError(f"node {v} out of range")
    if graph.labels[v] == UNLABELED:
        raise ContractError(f"node {v} is unlabeled")
    nbrs = graph.adj.neighbors(v)
    if nbrs.size == 0:
        raise UndefinedHomophilyError(f"node {v} is isolated")
    nbr_labels = graph.labels[nbrs]
    if np.any(nbr_labels == UNLABELED):
        raise ContractError(f"node {v} has an unlabeled neighbor")
    return float(np.mean(nbr_labels == graph.labels[v]))


def _homophily_eligible(graph: Graph) -> Array:
    """Labeled nodes with degree > 0 and fully labeled neighborhoods."""
    out = []
    for v in graph.labeled_nodes():
        nbrs = graph.adj.neighbors(int(v))
        if nbrs.size == 0:
            continue
        if np.any(graph.labels[nbrs] == UNLABELED):
            continue
        out.append(int(v))
    return np.asarray(out, dtype=np.int64)


def majority_class_of(labels: Array, num_classes: int) -> int:
    """Most frequent class; ties break to the lowest index."""
    labels = labels[labels != UNLABELED]
    if labels.size == 0:
        raise EmptyInputError("no labeled nodes")
    counts = np.bincount(labels, minlength=num_classes)
    return int(np.argmax(counts))


def client_stats(graph: Graph, split: NodeSplit | None = None) -> ClientStats:
    """Class counts plus majority/minority mean homophily.

    The majority class is computed from training labels when a split is
    given, otherwise from all labels. Counts and homophily always cover all
    labeled nodes; isolated nodes and nodes with unlabeled neighbors are
    skipped in the homophily averages.
    """
    labeled = graph.labeled_nodes()
    if labeled.size == 0:
        raise EmptyInputError("client has no labeled nodes")
    if split is not None:
        majority = majority_class_of(graph.labels[split.train], graph.num_classes)
    else:
        majority = majority_class_of(graph.labels, graph.num_classes)
    counts = np.bincount(graph.labels[labeled], minlength=graph.num_classes)

    eligible = _homophily_eligible(graph)
    homs = {int(v): node_homophily(graph, int(v)) for v in eligible}

    def mean_for(mask_nodes):
        vals = [homs[v] for v in mask_nodes if v in homs]
        return float(np.mean(vals)) if vals else None

    maj_nodes = [int(v) for v in labeled if graph.labels[v] == majority]
    min_nodes = [int(v) for v in labeled if graph.labels[v] != majority]
    per_class = [mean_for([int(v) for v in labeled if graph.labels[v] == c])
                 for c in range(graph.num_classes)]
    return ClientStats(
        class_counts=counts,
        majority_class=majority,
        majority_homophily=mean_for(maj_nodes),
        minority_homophily=mean_for(min_nodes) if min_nodes else None,
        per_class_homophily=per_class,
    )


def normalized_adjacency(graph: Graph, mode: str) -> SparseAdj:
    """Build the propagation operator used by GNN backbones.

    ``sym_selfloop``: D̃^{-1/2} (A + I) D̃^{-1/2} with D̃ the degree of A + I.
    ``mean_rowstoch``: D^{-1} A; rows of isolated nodes stay all-zero.
    """
    import scipy.sparse as sp

    a = graph.adj.csr()
    if mode == "sym_selfloop":
        a_tilde = (a + sp.identity(graph.n, format="csr")).tocsr()
        deg = np.asarray(a_tilde.sum(axis=1)).reshape(-1)
        inv_sqrt = 1.0 / np.sqrt(deg)
        norm = sp.diags(inv_sqrt) @ a_tilde @ sp.diags(inv_sqrt)
        return SparseAdj.from_csr(norm.tocsr())
    if mode == "mean_rowstoch":
        deg = np.asarray(a.sum(axis=1)).reshape(-1)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
        norm = sp.diags(inv) @ a
        return SparseAdj.from_csr(norm.tocsr())
    raise ConfigError(f"unknown normalization mode {mode!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(graph: Graph, path) -> None:
    """Write the canonical text form: header, node lines, edges once (u < v)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"graph {graph.n} {graph.feature_dim} {graph.num_classes}\n")
        for i in range(graph.n):
            lab = "-" if graph.labels[i] == UNLABELED else str(int(graph.labels[i]))
            feats = " ".join(_fmt(v) for v in graph.features[i])
            fh.write(f"node {i} {lab} {feats}\n" if feats else f"node {i} {lab}\n")
        for u in range(graph.n):
            for v in graph.adj.neighbors(u):
                if u < v:
                    fh.write(f"edge {u} {int(v)}\n")


def load_graph(path) -> Graph:
    """Parse a graph file; errors carry the offending line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty graph file", line=1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != "graph":
        raise ParseError("expected header 'graph <n> <d_x> <d_c>'", line=1)
    try:
        n, d_x, d_c = int(head[1]), int(head[2]), int(head[3])
    except ValueError:
        raise ParseError("non-integer value in graph header", line=1) from None
    if n < 0 or d_x < 0 or d_c < 1:
        raise ParseError("invalid graph dimensions in header", line=1)

    features = np.zeros((n, d_x))
    labels = np.full(n, UNLABELED, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for i in range(n):
        lineno = 2 + i
        if lineno - 1 >= len(lines):
            raise ParseError(f"expected {n} node lines", line=len(lines))
        parts = lines[lineno - 1].split()
        if len(parts) != 3 + d_x or parts[0] != "node":
            raise ParseError(f"expected 'node <id> <label|-> <{d_x} features>'", line=lineno)
        try:
            node_id = int(parts[1])
        except ValueError:
            raise ParseError("non-integer node id", line=lineno) from None
        if not 0 <= node_id < n or seen[node_id]:
            raise ParseError(f"bad or repeated node id {node_id}", line=lineno)
        seen[node_id] = True
        if parts[2] != "-":
            try:
                labels[node_id] = int(parts[2])
            except ValueError:
                raise ParseError("label must be an integer or '-'", line=lineno) from None
            if not 0 <= labels[node_id] < d_c:
                raise ParseError(f"label {labels[node_id]} out of range", line=lineno)
        try:
            features[node_id] = [float(v) for v in parts[3:]]
        except ValueError:
            raise ParseError("non-numeric feature value", line=lineno) from None

    canonical: set[tuple[int, int]] = set()
    reversed_pairs: dict[tuple[int, int], int] = {}
    for offset, raw in enumerate(lines[1 + n:]):
        lineno = 2 + n + offset
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 3 or parts[0] != "edge":
            raise ParseError("expected 'edge <u> <v>'", line=lineno)
        try:
            u, v = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError("non-integer edge endpoint", line=lineno) from None
        if not (0 <= u < n and 0 <= v < n):
            raise ParseError(f"edge endpoint out of range: ({u}, {v})", line=lineno)
        if u == v:
            raise ParseError(f"self-loop on node {u}", line=lineno)
        if u < v:
            if (u, v) in canonical:
                raise ParseError(f"duplicate edge ({u}, {v})", line=lineno)
            canonical.add((u, v))
        else:
            if (v, u) in reversed_pairs:
                raise ParseError(f"duplicate edge ({u}, {v})", line=lineno)
            reversed_pairs[(v, u)] = lineno
    for (u, v), lineno in reversed_pairs.items():
        if (u, v) not in canonical:
            raise ValidationError(
                f"line {lineno}: edge ({v}, {u}) listed without its mirror ({u}, {v})")

    if n and not np.all(seen):
        raise ParseError("missing node line(s)", line=1 + n)
    edges = np.array(sorted(canonical), dtype=np.int64).reshape(-1, 2)
    adj = SparseAdj.from_edges(n, edges)
    return Graph(adj=adj, features=features, labels=labels, num_classes=d_c)


def save_split(split: NodeSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
            for v in part:
                fh.write(f"split {int(v)} {name}\n")


def load_split(path) -> NodeSplit:
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            toks = raw.split()
            if len(toks) != 3 or toks[0] != "split" or toks[2] not in parts:
                raise ParseError("expected 'split <id> <train|val|test>'", line=lineno)
            try:
                parts[toks[2]].append(int(toks[1]))
            except ValueError:
                raise ParseError("non-integer node id", line=lineno) from None
    return NodeSplit(train=parts["train"], val=parts["val"], test=parts["test"])
