"""Two-class synthetic heterophilic graph generator and separability checks.

Each client graph couples Gaussian node features with class-dependent edges:
features are N(mu_1, I) for class-0 nodes and N(mu_2, I) for class-1 nodes,
the minority:majority node ratio is q, and every node's neighbors are drawn
from the majority class with probability p (so majority nodes are homophilic
and minority nodes are heterophilic).

Edges are realized by sampling block-wise edge counts that keep the expected
neighbor class mix of *every* node at exactly p: with mean majority degree D,

    within-majority edges   e_mm = n_maj * D * p / 2
    cross edges             e_mi = n_maj * D * (1 - p)
    within-minority edges   e_ii = n_maj * D * (1 - p)^2 / (2 p)

A naive "each node draws D neighbors, then symmetrize" scheme would not do
this: reciprocal edges arrive class-blind, which drags the realized neighbor
mix of majority nodes toward 2p/(1+p) and breaks the homophily and margin
statistics this module is meant to verify.

The separability utilities compare a per-client optimal linear classifier on
raw neighborhoods against one that replaces neighborhoods with class-wise
global neighbor means: closed forms ``dist`` and ``dist_prime`` plus a
Monte-Carlo margin estimator over freshly sampled graphs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .graphcore import Graph, majority_class_of
from .kvconfig import parse_floats, parse_ints
from .numcore import Array, SparseAdj


@dataclass
class GenConfig:
    """Parameters of the per-client generative model.

    ``majority[k]`` is 0 when class c1 is client k's majority, 1 for c2.
    ``mean_degree`` is the expected degree of majority-class nodes.
    """

    mu1: Array
    mu2: Array
    p: list[float]
    q: list[float]
    majority: list[int]
    nodes: list[int]
    mean_degree: float = 10.0

    def __post_init__(self):
        self.mu1 = np.asarray(self.mu1, dtype=np.float64).reshape(-1)
        self.mu2 = np.asarray(self.mu2, dtype=np.float64).reshape(-1)
        if self.mu1.shape != self.mu2.shape:
            raise ShapeError("mu1 and mu2 must have the same length")
        if np.array_equal(self.mu1, self.mu2):
            raise ConfigError("mu1 and mu2 must differ")
        k = len(self.p)
        if isinstance(self.nodes, int):
            self.nodes = [self.nodes] * k
        self.nodes = [int(n) for n in self.nodes]
        if not (len(self.q) == len(self.majority) == len(self.nodes) == k) or k == 0:
            raise ConfigError("p, q, majority, nodes must have equal nonzero length")
        for pk in self.p:
            if not 0.5 < pk < 1.0:
                raise ConfigError(f"p must lie in (1/2, 1), got {pk}")
        for qk in self.q:
            if not 0.0 < qk < 1.0:
                raise ConfigError(f"q must lie in (0, 1), got {qk}")
        for m in self.majority:
            if m not in (0, 1):
                raise ConfigError("majority entries must be 0 (c1) or 1 (c2)")
        for n in self.nodes:
            if n < 4:
                raise ConfigError("each client needs at least 4 nodes")
        if self.mean_degree <= 0:
            raise ConfigError("mean_degree must be positive")

    @property
    def num_clients(self) -> int:
        return len(self.p)

    @property
    def feature_dim(self) -> int:
        return int(self.mu1.size)


def gen_config_from_kv(kv: dict[str, str]) -> GenConfig:
    required = ("mu1", "mu2", "p", "q", "majority", "nodes")
    for key in required:
        if key not in kv:
            raise ConfigError(f"generator config is missing key {key!r}")
    majority = []
    for tok in kv["majority"].split(","):
        tok = tok.strip().lower()
        if tok not in ("c1", "c2", "0", "1"):
            raise ConfigError("majority entries must be c1 or c2")
        majority.append(0 if tok in ("c1", "0") else 1)
    return GenConfig(
        mu1=np.array(parse_floats(kv["mu1"], "mu1")),
        mu2=np.array(parse_floats(kv["mu2"], "mu2")),
        p=parse_floats(kv["p"], "p"),
        q=parse_floats(kv["q"], "q"),
        majority=majority,
        nodes=parse_ints(kv["nodes"], "nodes"),
        mean_degree=float(kv.get("mean_degree", "10")),
    )


def _sample_within_pairs(rng: np.random.Generator, count: int, n: int) -> Array:
    """``count`` distinct unordered pairs within a block of size ``n``."""
    count = min(count, n * (n - 1) // 2)
    chosen: dict[int, tuple[int, int]] = {}
    while len(chosen) < count:
        need = count - len(chosen)
        i = rng.integers(0, n, size=2 * need + 8)
        j = rng.integers(0, n, size=2 * need + 8)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        for a, b in zip(lo, hi):
            if a != b:
                chosen.setdefault(int(a) * n + int(b), (int(a), int(b)))
                if len(chosen) == count:
                    break
    return np.array(list(chosen.values()), dtype=np.int64).reshape(-1, 2)


def _sample_cross_pairs(rng: np.random.Generator, count: int, n_a: int, n_b: int) -> Array:
    """``count`` distinct pairs between two blocks of sizes n_a, n_b."""
    count = min(count, n_a * n_b)
    chosen: dict[int, tuple[int, int]] = {}
    while len(chosen) < count:
        need = count - len(chosen)
        i = rng.integers(0, n_a, size=need + 8)
        j = rng.integers(0, n_b, size=need + 8)
        for a, b in zip(i, j):
            chosen.setdefault(int(a) * n_b + int(b), (int(a), int(b)))
            if len(chosen) == count:
                break
    return np.array(list(chosen.values()), dtype=np.int64).reshape(-1, 2)


def generate_client_graph(cfg: GenConfig, client: int, seed) -> Graph:
    """Sample client ``client``'s graph; deterministic for a given seed."""
    if not 0 <= client < cfg.num_clients:
        raise ConfigError(f"client index {client} out of range")
    rng = np.random.default_rng(seed)
    n = cfg.nodes[client]
    p, q = cfg.p[client], cfg.q[client]
    maj_label = cfg.majority[client]
    n_min = max(1, int(round(n * q / (1.0 + q))))
    n_maj = n - n_min

    mu_maj = cfg.mu1 if maj_label == 0 else cfg.mu2
    mu_min = cfg.mu2 if maj_label == 0 else cfg.mu1
    d = cfg.feature_dim
    features = np.empty((n, d))
    features[:n_maj] = rng.standard_normal((n_maj, d)) + mu_maj
    features[n_maj:] = rng.standard_normal((n_min, d)) + mu_min
    labels = np.full(n, maj_label, dtype=np.int64)
    labels[n_maj:] = 1 - maj_label

    deg = cfg.mean_degree
    e_mm = int(round(n_maj * deg * p / 2.0))
    e_mi = int(round(n_maj * deg * (1.0 - p)))
    e_ii = int(round(n_maj * deg * (1.0 - p) ** 2 / (2.0 * p)))
    mm = _sample_within_pairs(rng, e_mm, n_maj)
    mi = _sample_cross_pairs(rng, e_mi, n_maj, n_min)
    ii = _sample_within_pairs(rng, e_ii, n_min) + n_maj
    edges = [mm]
    if mi.size:
        edges.append(np.column_stack([mi[:, 0], mi[:, 1] + n_maj]))
    if ii.size:
        edges.append(ii)
    all_edges = np.concatenate([e for e in edges if e.size], axis=0) \
        if any(e.size for e in edges) else np.empty((0, 2), dtype=np.int64)
    adj = SparseAdj.from_edges(n, all_edges)
    return Graph(adj=adj, features=features, labels=labels, num_classes=2)


def generate_all_clients(cfg: GenConfig, seed) -> list[Graph]:
    children = np.random.SeedSequence(seed).spawn(cfg.num_clients) \
        if isinstance(seed, int) else seed.spawn(cfg.num_clients)
    return [generate_client_graph(cfg, k, children[k]) for k in range(cfg.num_clients)]


def dist_closed_form(mu1, mu2) -> float:
    """Half the distance between the two class-feature means."""
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    mu2 = np.asarray(mu2, dtype=np.float64).reshape(-1)
    if mu1.shape != mu2.shape:
        raise ShapeError("mean vectors must have the same length")
    return float(np.linalg.norm(mu1 - mu2) / 2.0)


def dist_prime_closed_form(mu1, mu2, p, q) -> float:
    """Margin after swapping neighborhoods for global class-wise means.

    Equals ``(1 + sum_k (1 - q_k) (p_k - 1/2)) * dist``; strictly larger than
    ``dist`` for any valid configuration.
    """
    p = list(p)
    q = list(q)
    if len(p) != len(q) or not p:
        raise ConfigError("p and q must have equal nonzero length")
    for pk in p:
        if not 0.5 < pk < 1.0:
            raise ConfigError(f"p must lie in (1/2, 1), got {pk}")
    for qk in q:
        if not 0.0 < qk < 1.0:
            raise ConfigError(f"q must lie in (0, 1), got {qk}")
    factor = 1.0 + sum((1.0 - qk) * (pk - 0.5) for pk, qk in zip(p, q))
    return factor * dist_closed_form(mu1, mu2)


def balance_gap(cfg: GenConfig) -> float:
    """Sum of (1 - q) over c1-majority clients minus the c2 side.

    The closed form for the global-means margin assumes this is zero (or that
    mu1 + mu2 = 0, which kills the imbalance direction).
    """
    gap = 0.0
    for qk, m in zip(cfg.q, cfg.majority):
        gap += (1.0 - qk) if m == 0 else -(1.0 - qk)
    return gap


def _neighbor_means(graph: Graph) -> tuple[Array, Array]:
    """Per-node mean neighbor features and the non-isolated mask."""
    deg = graph.degrees().astype(np.float64)
    sums = graph.adj.csr() @ graph.features
    mask = deg > 0
    out = np.zeros_like(sums)
    out[mask] = sums[mask] / deg[mask, None]
    return out, mask


def global_neighbor_means(graphs: list[Graph]) -> tuple[Array, Array]:
    """Class-wise sums of per-client mean aggregated-neighbor features.

    A client contributes full weight to its majority class and weight q (its
    minority:majority ratio) to the other class.
    """
    if not graphs:
        raise EmptyInputError("need at least one client graph")
    counts = np.zeros(2)
    for g in graphs:
        counts += np.bincount(g.labels[g.labels >= 0], minlength=2)[:2]
    if np.any(counts == 0):
        raise EmptyInputError("both classes must appear somewhere globally")
    d = graphs[0].feature_dim
    s = [np.zeros(d), np.zeros(d)]
    for g in graphs:
        nbr_mean, mask = _neighbor_means(g)
        if not mask.any():
            raise EmptyInputError("a client graph has no edges")
        h_bar = nbr_mean[mask].mean(axis=0)
        maj = majority_class_of(g.labels, 2)
        cls = np.bincount(g.labels, minlength=2)
        q_hat = cls[1 - maj] / cls[maj]
        s[maj] = s[maj] + h_bar
        s[1 - maj] = s[1 - maj] + q_hat * h_bar
    return s[0], s[1]


@dataclass
class MarginEstimate:
    mean: float
    stderr: float
    per_trial: Array = field(repr=False)


def _client_margin(rep: Array, labels: Array) -> float:
    m0 = rep[labels == 0]
    m1 = rep[labels == 1]
    if m0.size == 0 or m1.size == 0:
        raise EmptyInputError("margin needs both classes present in the client")
    return float(np.linalg.norm(m0.mean(axis=0) - m1.mean(axis=0)) / 2.0)


def _margin_one_trial(cfg: GenConfig, mode: str, trial_seed) -> float:
    graphs = generate_all_clients(cfg, trial_seed)
    if mode == "global":
        s1, s2 = global_neighbor_means(graphs)
    margins = []
    for g in graphs:
        if mode == "local":
            nbr_mean, mask = _neighbor_means(g)
            rep = (g.features + nbr_mean)[mask]
            labels = g.labels[mask]
        else:
            rep = g.features + np.where(g.labels[:, None] == 0, s1, s2)
            labels = g.labels
        margins.append(_client_margin(rep, labels))
    return float(np.mean(margins))


def empirical_margin(cfg: GenConfig, mode: str, trials: int, seed: int,
                     threads: int = 1) -> MarginEstimate:
    """Monte-Carlo class-to-boundary margin over freshly sampled graphs.

    ``mode='local'`` represents each node by its features plus its true mean
    neighborhood; ``mode='global'`` swaps the neighborhood for the matching
    class-wise global neighbor mean. The per-client separator direction is
    the difference of class means; the reported margin is the projected
    class-to-boundary distance averaged over clients, then over trials.
    """
    if mode not in ("local", "global"):
        raise ConfigError(f"unknown margin mode {mode!r}")
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    children = np.random.SeedSequence(seed).spawn(trials)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_trial = list(pool.map(
                lambda ss: _margin_one_trial(cfg, mode, ss), children))
    else:
        per_trial = [_margin_one_trial(cfg, mode, ss) for ss in children]
    per_trial = np.asarray(per_trial)
    stderr = float(per_trial.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return MarginEstimate(mean=float(per_trial.mean()), stderr=stderr,
                          per_trial=per_trial)


@dataclass
class SeparabilityReport:
    dist: float
    dist_prime: float
    margin_local: MarginEstimate
    margin_global: MarginEstimate


def separability_report(cfg: GenConfig, trials: int, seed: int,
                        threads: int = 1) -> SeparabilityReport:
    """Closed forms plus paired Monte-Carlo margins (same graphs per trial)."""
    return SeparabilityReport(
        dist=dist_closed_form(cfg.mu1, cfg.mu2),
        dist_prime=dist_prime_closed_form(cfg.mu1, cfg.mu2, cfg.p, cfg.q),
        margin_local=empirical_margin(cfg, "local", trials, seed, threads),
        margin_global=empirical_margin(cfg, "global", trials, seed, threads),
    )
