import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedspray import models as md
from fedspray import numcore as nc
from fedspray.errors import ConfigError, ContractError, ShapeError
from fedspray.graphcore import normalized_adjacency

from test_graphcore import make_graph, random_graph


def forward_on(graph, backbone, seed=0, hidden=8):
    rng = np.random.default_rng(seed)
    params = md.init_gnn_params(backbone, graph.feature_dim, hidden,
                                graph.num_classes, rng)
    adj = md.adjacency_for(backbone, graph)
    return md.gnn_forward(params, graph.features, adj), params


class TestBackbones:
    @pytest.mark.parametrize("backbone", md.BACKBONES)
    def test_rows_stochastic(self, backbone):
        g = random_graph(2, n=15)
        out, _ = forward_on(g, backbone)
        assert out.shape == (g.n, g.num_classes)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-9
        assert np.min(out) >= 0.0

    def test_mlp_ignores_structure(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(6, 3))
        sparse = make_graph(6, [(0, 1)], [0] * 6, features=feats, num_classes=2)
        dense = make_graph(6, [(u, v) for u in range(6) for v in range(u + 1, 6)],
                           [0] * 6, features=feats, num_classes=2)
        out_a, params = forward_on(sparse, "mlp", seed=9)
        out_b = md.gnn_forward(params, dense.features, None)
        assert np.array_equal(out_a, out_b)

    def test_gcn_isolated_node_equals_mlp(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(3, 4))
        g = make_graph(3, [(0, 1)], [0, 0, 0], features=feats, num_classes=2)
        params = md.init_gnn_params("gcn", 4, 8, 2, np.random.default_rng(5))
        gcn_out = md.gnn_forward(params, g.features, md.adjacency_for("gcn", g))
        mlp = md.GnnParams(backbone="mlp", layers=params.layers, hidden_dim=8)
        mlp_out = md.gnn_forward(mlp, g.features[2:3], None)
        assert np.max(np.abs(gcn_out[2] - mlp_out[0])) <= 1e-12

    def test_sgc_is_collapsed_linear_gcn(self):
        for seed in range(3):
            g = random_graph(seed, n=9)
            rng = np.random.default_rng(seed + 100)
            w1 = rng.normal(size=(g.feature_dim, 5))
            w2 = rng.normal(size=(5, g.num_classes))
            b2 = rng.normal(size=(1, g.num_classes))
            adj = md.adjacency_for("sgc", g)
            sgc = md.GnnParams(backbone="sgc", layers=[(w1 @ w2, b2)], hidden_dim=5)
            got = md.gnn_forward(sgc, g.features, adj)
            # linearized two-layer propagation with the hidden bias zeroed
            a = adj.to_dense()
            manual = a @ (a @ g.features @ w1) @ w2 + b2
            expect = nc.row_softmax(manual)
            assert np.max(np.abs(got - expect)) <= 1e-10

    @pytest.mark.parametrize("backbone", md.BACKBONES)
    def test_permutation_equivariance(self, backbone):
        g = random_graph(7, n=12)
        rng = np.random.default_rng(3)
        perm = rng.permutation(g.n)
        edges = []
        for u in range(g.n):
            for v in g.adj.neighbors(u):
                if u < v:
                    a, b = int(perm[u]), int(perm[v])
                    edges.append((min(a, b), max(a, b)))
        permuted = make_graph(g.n, edges, g.labels[np.argsort(perm)],
                              features=g.features[np.argsort(perm)],
                              num_classes=g.num_classes)
        out, params = forward_on(g, backbone, seed=11)
        out_p = md.gnn_forward(params, permuted.features,
                               md.adjacency_for(backbone, permuted))
        # row i of the permuted run equals the row of the node it came from
        inverse = np.argsort(perm)
        assert np.max(np.abs(out_p - out[inverse])) <= 1e-9

    def test_init_deterministic(self):
        a = md.init_gnn_params("gcn", 4, 8, 3, np.random.default_rng(2))
        b = md.init_gnn_params("gcn", 4, 8, 3, np.random.default_rng(2))
        assert all(x.tobytes() == y.tobytes()
                   for x, y in zip(a.arrays(), b.arrays()))

    def test_unknown_backbone(self):
        with pytest.raises(ConfigError):
            md.init_gnn_params("gat", 4, 8, 2, np.random.default_rng(0))

    @pytest.mark.parametrize("backbone", md.BACKBONES)
    def test_gradients_flow(self, backbone):
        g = random_graph(5, n=10)
        rng = np.random.default_rng(8)
        params = md.init_gnn_params(backbone, g.feature_dim, 6, g.num_classes, rng)
        adj = md.adjacency_for(backbone, g)

        def loss(leaves):
            p = params.with_arrays(leaves)
            out = md.gnn_forward(p, g.features, adj)
            return nc.scale(nc.sum_all(nc.mul(out, nc.log_clipped(out))), -1.0 / g.n)

        assert nc.finite_diff_check(loss, params.arrays(), seed=2) <= 1e-4


class TestEncoder:
    def test_zero_features_zero_embeddings(self):
        out = md.encoder_embed(np.zeros((3, 4)), np.zeros((1, 4)), np.zeros((5, 3)))
        assert np.array_equal(out, np.zeros((5, 4)))

    def test_projector_uniform_with_zero_weights(self):
        q = md.projector_forward(np.zeros((4, 3)), np.zeros((1, 3)),
                                 np.random.default_rng(0).normal(size=(6, 4)))
        assert np.max(np.abs(q - 1.0 / 3.0)) <= 1e-12

    def test_embed_gradient(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(7, 3))
        w, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))

        def loss(leaves):
            lw, lb = leaves
            e = md.encoder_embed(lw, lb, feats)
            return nc.scale(nc.sum_all(nc.mul(e, e)), 1.0 / 7.0)

        assert nc.finite_diff_check(loss, [w, b], seed=0) <= 1e-4

    def test_projector_gradient(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(6, 4))
        w, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))

        def loss(leaves):
            lw, lb = leaves
            q = md.projector_forward(lw, lb, e)
            return nc.scale(nc.sum_all(nc.mul(q, nc.log_clipped(q))), -1.0 / 6.0)

        assert nc.finite_diff_check(loss, [w, b], seed=1) <= 1e-4


class TestProxies:
    def test_labeled_get_class_rows(self):
        rows = np.arange(6.0).reshape(3, 2)
        proxies = md.StructureProxies(rows)
        q = np.full((2, 3), 1.0 / 3.0)
        out = md.proxy_lookup(proxies, [2, 1], q, [True, True])
        assert np.array_equal(out, rows[[2, 1]])

    def test_one_hot_soft_label_hits_class_row(self):
        rows = np.random.default_rng(0).normal(size=(3, 4))
        q = np.array([[0.0, 1.0, 0.0]])
        out = md.proxy_lookup(md.StructureProxies(rows), [-1], q, [False])
        assert np.max(np.abs(out[0] - rows[1])) <= 1e-12

    def test_uniform_soft_label_gives_row_mean(self):
        rows = np.random.default_rng(1).normal(size=(4, 3))
        q = np.full((1, 4), 0.25)
        out = md.proxy_lookup(md.StructureProxies(rows), [-1], q, [False])
        assert np.max(np.abs(out[0] - rows.mean(axis=0))) <= 1e-12

    def test_labeled_rows_ignore_soft_labels(self):
        rows = np.random.default_rng(2).normal(size=(3, 2))
        rng = np.random.default_rng(3)
        labels = [0, 2, 1]
        base = md.proxy_lookup(md.StructureProxies(rows), labels,
                               np.full((3, 3), 1 / 3), [True, True, True])
        logits = rng.normal(size=(3, 3))
        other_q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        out = md.proxy_lookup(md.StructureProxies(rows), labels, other_q,
                              [True, True, True])
        assert np.array_equal(base, out)

    @settings(max_examples=25)
    @given(st.integers(0, 10 ** 6))
    def test_unlabeled_rows_stay_in_hull(self, seed):
        rng = np.random.default_rng(seed)
        rows = rng.normal(size=(3, 4))
        logits = rng.normal(size=(5, 3))
        q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        out = md.proxy_lookup(md.StructureProxies(rows), [-1] * 5, q, [False] * 5)
        lo, hi = rows.min(axis=0), rows.max(axis=0)
        assert np.all(out >= lo - 1e-9)
        assert np.all(out <= hi + 1e-9)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            md.proxy_lookup(md.StructureProxies(np.zeros((2, 2))), [5],
                            np.full((1, 2), 0.5), [True])


class TestClassifierWithProxy:
    def test_zero_proxies_match_plain_classifier(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(5, 4))
        w, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
        with_zero = md.classifier_with_proxy(w, b, e, np.zeros_like(e))
        plain = nc.row_softmax(e @ w + b)
        assert np.max(np.abs(with_zero - plain)) <= 1e-12

    def test_rows_stochastic(self):
        rng = np.random.default_rng(1)
        out = md.classifier_with_proxy(rng.normal(size=(4, 3)), rng.normal(size=(1, 3)),
                                       rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-9

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            md.classifier_with_proxy(np.zeros((4, 2)), np.zeros((1, 2)),
                                     np.zeros((3, 4)), np.zeros((3, 5)))

    def test_gradients_reach_weights_and_proxies(self):
        rng = np.random.default_rng(2)
        e = rng.normal(size=(5, 4))
        w, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
        s = rng.normal(size=(5, 4))

        def loss(leaves):
            lw, lb, ls = leaves
            p = md.classifier_with_proxy(lw, lb, e, ls)
            return nc.scale(nc.sum_all(nc.mul(p, nc.log_clipped(p))), -1.0 / 5.0)

        assert nc.finite_diff_check(loss, [w, b, s], seed=4) <= 1e-4


def test_encoder_soft_targets_shapes():
    g = random_graph(1, n=12)
    rng = np.random.default_rng(0)
    enc = md.init_encoder_params(g.feature_dim, 6, g.num_classes, rng)
    proxies = md.StructureProxies.zeros(g.num_classes, 6)
    labeled = np.zeros(g.n, dtype=bool)
    labeled[:4] = g.labels[:4] >= 0
    e, q, p = md.encoder_soft_targets(enc, proxies, g.features, g.labels, labeled)
    assert e.shape == (g.n, 6)
    assert q.shape == (g.n, g.num_classes)
    assert p.shape == (g.n, g.num_classes)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-9
