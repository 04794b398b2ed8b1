import numpy as np
import pytest

from fedspray import graphcore as gc
from fedspray import partition as pt
from fedspray.errors import ConfigError, DegenerateInputError
from fedspray.numcore import SparseAdj

from test_graphcore import make_graph, random_graph


def clique_edges(nodes):
    nodes = list(nodes)
    return [(u, v) for i, u in enumerate(nodes) for v in nodes[i + 1:]]


def two_cliques(k, bridge=False):
    edges = clique_edges(range(k)) + clique_edges(range(k, 2 * k))
    if bridge:
        edges.append((0, k))
    labels = [0] * (2 * k)
    return make_graph(2 * k, edges, labels, num_classes=2)


def brute_force_modularity(graph, membership):
    m = graph.adj.nnz / 2.0
    two_m = 2.0 * m
    q = 0.0
    for c in np.unique(membership):
        nodes = np.flatnonzero(membership == c)
        in_c = 0.0
        tot_c = 0.0
        for u in nodes:
            for v in graph.adj.neighbors(int(u)):
                tot_c += 1.0
                if membership[v] == c:
                    in_c += 1.0
        q += in_c / two_m - (tot_c / two_m) ** 2
    return q


def set_partitions(n):
    """All partitions of range(n) as restricted-growth strings."""
    a = [0] * n
    b = [1] * n
    while True:
        yield list(a)
        i = n - 1
        while i > 0 and a[i] == b[i]:
            i -= 1
        if i == 0:
            return
        a[i] += 1
        for j in range(i + 1, n):
            a[j] = 0
            b[j] = max(b[i], a[i] + 1) if j == i + 1 else max(b[j - 1], a[j - 1] + 1)


class TestLouvain:
    def test_bridged_cliques_found_optimal(self):
        g = two_cliques(5, bridge=True)
        assignment = pt.louvain(g, seed=1)
        assert assignment.num_communities == 2
        left = set(assignment.membership[:5].tolist())
        right = set(assignment.membership[5:].tolist())
        assert len(left) == 1 and len(right) == 1 and left != right
        # exhaustive oracle: no partition of the 10 nodes scores higher
        u = np.repeat(np.arange(g.n), np.diff(g.adj.indptr))
        v = g.adj.indices
        deg = g.degrees().astype(float)
        two_m = float(g.adj.nnz)
        best = -1.0
        for rgs in set_partitions(g.n):
            memb = np.asarray(rgs)
            inside = float(np.sum(memb[u] == memb[v]))
            tot = np.bincount(memb, weights=deg)
            q = inside / two_m - float(np.sum((tot / two_m) ** 2))
            best = max(best, q)
        found = pt.modularity(g, assignment)
        assert found == pytest.approx(best, abs=1e-12)

    def test_complete_graph_single_community(self):
        g = make_graph(6, clique_edges(range(6)), [0] * 6, num_classes=1)
        assignment = pt.louvain(g, seed=3)
        assert assignment.num_communities == 1

    def test_deterministic_per_seed(self):
        g = random_graph(5, n=40)
        a = pt.louvain(g, seed=9)
        b = pt.louvain(g, seed=9)
        assert np.array_equal(a.membership, b.membership)

    def test_edgeless_rejected(self):
        g = gc.Graph(adj=SparseAdj.from_edges(3, np.empty((0, 2), dtype=np.int64)),
                     features=np.zeros((3, 1)), labels=np.array([0, 0, 0]),
                     num_classes=1)
        with pytest.raises(DegenerateInputError):
            pt.louvain(g, seed=0)

    @pytest.mark.parametrize("seed", range(4))
    def test_runs_clean_on_random_graphs(self, seed):
        # the per-pass monotonicity assert lives inside louvain
        g = random_graph(seed, n=35)
        assignment = pt.louvain(g, seed=seed)
        assert assignment.membership.shape == (g.n,)
        assert set(np.unique(assignment.membership)) == set(range(assignment.num_communities))


class TestModularity:
    def test_single_community_is_zero(self):
        g = two_cliques(4, bridge=True)
        a = pt.CommunityAssignment(np.zeros(g.n, dtype=np.int64), 1)
        assert pt.modularity(g, a) == pytest.approx(0.0, abs=1e-15)

    def test_disconnected_cliques_half(self):
        g = two_cliques(5, bridge=False)
        memb = np.array([0] * 5 + [1] * 5)
        a = pt.CommunityAssignment(memb, 2)
        assert pt.modularity(g, a) == pytest.approx(0.5, abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(seed, n=20)
        memb = rng.integers(0, 4, size=g.n)
        memb, count = np.unique(memb, return_inverse=True)[1], len(np.unique(memb))
        a = pt.CommunityAssignment(memb, count)
        assert pt.modularity(g, a) == pytest.approx(
            brute_force_modularity(g, a.membership), abs=1e-12)


class TestMakeClients:
    def test_single_community_takes_all(self):
        g = make_graph(4, clique_edges(range(4)), [0, 1, 0, 1])
        assignment = pt.CommunityAssignment(np.zeros(4, dtype=np.int64), 1)
        (client,) = pt.make_clients(g, assignment, k=1, seed=0)
        assert client.graph.n == 4
        assert client.original_ids.tolist() == [0, 1, 2, 3]

    def test_split_sizes_10_labeled(self):
        g = make_graph(10, [(i, i + 1) for i in range(9)], list(np.arange(10) % 2))
        assignment = pt.CommunityAssignment(np.zeros(10, dtype=np.int64), 1)
        (client,) = pt.make_clients(g, assignment, k=1, seed=7)
        assert client.split.train.size == 4
        assert client.split.val.size == 3
        assert client.split.test.size == 3

    def test_too_many_clients_rejected(self):
        g = two_cliques(3)
        assignment = pt.louvain(g, seed=0)
        with pytest.raises(ConfigError):
            pt.make_clients(g, assignment, k=assignment.num_communities + 1)

    def test_disjoint_union_is_topk(self):
        g = random_graph(11, n=40)
        assignment = pt.louvain(g, seed=2)
        k = min(3, assignment.num_communities)
        clients = pt.make_clients(g, assignment, k=k, seed=1)
        all_ids = np.concatenate([c.original_ids for c in clients])
        assert len(set(all_ids.tolist())) == all_ids.size
        sizes = np.bincount(assignment.membership)
        top = sorted(range(assignment.num_communities), key=lambda c: (-sizes[c], c))[:k]
        expected = np.flatnonzero(np.isin(assignment.membership, top))
        assert set(all_ids.tolist()) == set(expected.tolist())

    def test_clients_ranked_by_size_tie_low_id(self):
        memb = np.array([0] * 3 + [1] * 5 + [2] * 3)
        edges = clique_edges(range(3)) + clique_edges(range(3, 8)) + clique_edges(range(8, 11))
        g = make_graph(11, edges, [0] * 11, num_classes=1)
        clients = pt.make_clients(g, pt.CommunityAssignment(memb, 3), k=3, seed=0)
        assert clients[0].graph.n == 5      # biggest first
        assert clients[1].original_ids[0] == 0   # tie between 0 and 2 -> community 0
        assert clients[2].original_ids[0] == 8

    def test_cross_community_edges_dropped(self):
        g = two_cliques(4, bridge=True)
        memb = np.array([0] * 4 + [1] * 4)
        clients = pt.make_clients(g, pt.CommunityAssignment(memb, 2), k=2, seed=0)
        for c in clients:
            assert c.graph.adj.nnz == 2 * len(clique_edges(range(4)))

    def test_round_trip_through_files(self, tmp_path):
        g = random_graph(3, n=30, label_frac=0.8)
        assignment = pt.louvain(g, seed=4)
        clients = pt.make_clients(g, assignment, k=1, seed=5)
        c = clients[0]
        gpath, spath = tmp_path / "c.graph", tmp_path / "c.split"
        gc.save_graph(c.graph, gpath)
        gc.save_split(c.split, spath)
        g2 = gc.load_graph(gpath)
        s2 = gc.load_split(spath)
        assert g2.features.tobytes() == c.graph.features.tobytes()
        assert g2.adj.indices.tolist() == c.graph.adj.indices.tolist()
        assert s2.train.tolist() == c.split.train.tolist()
        assert s2.test.tolist() == c.split.test.tolist()
