"""Federated round engine: two-phase local updates, server aggregation, and
the local/fedavg baselines.

One round of the full method runs, per client, Phase 1 (train the personal
GNN for E epochs against soft targets frozen from the previous round's
global encoder and proxies) and Phase 2 (train a local copy of the encoder
plus per-node structure proxies against the fresh GNN predictions, then
collapse node proxies into class rows). The server then averages encoders by
node count and aligns proxy rows by per-client class frequency. Personal GNN
parameters never reach the server.

Clients within a round are independent; with ``threads > 1`` they run on a
pool, and aggregation always reduces in ascending client order so results do
not depend on scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .graphcore import UNLABELED
from .kvconfig import parse_kv_file
from .losses import cross_entropy, encoder_loss, gnn_loss
from .models import (
    EncoderParams,
    GnnParams,
    StructureProxies,
    adjacency_for,
    classifier_with_proxy,
    encoder_embed,
    encoder_soft_targets,
    gnn_forward,
    init_encoder_params,
    init_gnn_params,
    projector_forward,
)
from .numcore import AdamState, Array, Tape, adam_step, backward, gather_rows, one_hot, value_of
from .partition import ClientDataset

METHODS = ("fedspray", "fedavg", "local")


@dataclass
class RunConfig:
    """Full experiment description for one training run."""

    method: str = "fedspray"
    backbone: str = "gcn"
    rounds: int = 300
    local_epochs: int = 5
    lr_gnn: float = 0.003
    lr_encoder: float = 0.003
    lr_proxy: float = 0.02
    lambda1: float = 5.0
    lambda2: float = 1.0
    hidden_dim: int = 64
    proxy_dim: int = 64
    seed: int = 1
    s_zero: bool = False  # freeze structure proxies at zero (ablation)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        from .models import BACKBONES
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be at least 1")
        for name in ("lr_gnn", "lr_encoder", "lr_proxy"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be non-negative")
        if self.hidden_dim < 1 or self.proxy_dim < 1:
            raise ConfigError("hidden_dim and proxy_dim must be positive")


_RUN_KEYS = {
    "method": str, "backbone": str, "rounds": int, "local_epochs": int,
    "lr_gnn": float, "lr_encoder": float, "lr_proxy": float,
    "lambda1": float, "lambda2": float, "hidden_dim": int, "proxy_dim": int,
    "seed": int, "s_zero": None,
}


def run_config_from_kv(kv: dict[str, str]) -> RunConfig:
    kwargs = {}
    for key, value in kv.items():
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown run config key {key!r}")
        caster = _RUN_KEYS[key]
        if caster is None:  # boolean
            low = value.lower()
            if low not in ("true", "false", "0", "1", "yes", "no"):
                raise ConfigError(f"key {key!r}: expected a boolean")
            kwargs[key] = low in ("true", "1", "yes")
        else:
            try:
                kwargs[key] = caster(value)
            except ValueError:
                raise ConfigError(f"key {key!r}: cannot parse {value!r}") from None
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    return run_config_from_kv(parse_kv_file(path))


@dataclass
class ClientState:
    """Everything one client owns across rounds."""

    client_id: int
    data: ClientDataset
    gnn: GnnParams
    gnn_opt: AdamState
    adj: object  # normalized adjacency for the backbone (None for mlp)
    train_targets: Array
    majority_class: int
    encoder: EncoderParams | None = None
    proxies: StructureProxies | None = None
    node_proxies: Array | None = None  # working set, one row per train node
    encoder_opt: AdamState | None = None
    proxy_opt: AdamState | None = None


@dataclass
class ServerState:
    """Global state: the encoder, the proxies, and aggregation weights.

    Deliberately holds no GNN parameters; those are personal.
    """

    encoder: EncoderParams | None
    proxies: StructureProxies | None
    node_counts: Array
    class_ratios: Array  # [client, class], fractions within each train set


@dataclass
class MetricRow:
    round: int
    client: int
    split: str
    overall: float
    minority: float | None


@dataclass
class RunResult:
    rows: list[MetricRow]
    best_round: int
    test_overall: float
    test_minority: float | None
    server: ServerState | None
    clients: list[ClientState]
    theta_history: list[list[list[Array]]] | None = field(default=None, repr=False)


def _train_labels(client: ClientDataset) -> Array:
    labels = client.graph.labels[client.split.train]
    if np.any(labels == UNLABELED):
        raise ContractError("train split contains unlabeled nodes")
    return labels


def class_ratios(client: ClientDataset, num_classes: int) -> Array:
    """Fraction of each class within the client's train-labeled set."""
    labels = _train_labels(client)
    if labels.size == 0:
        return np.zeros(num_classes)
    return np.bincount(labels, minlength=num_classes) / labels.size


def _train_gnn_epochs(client: ClientState, cfg: RunConfig, teacher: Array | None) -> None:
    """E epochs of full-graph Adam on the GNN objective.

    ``teacher`` is the frozen soft-target matrix for the KD term; pass None
    (or set lambda1 = 0) for plain cross-entropy training. Both paths build
    the identical tape for the CE term, so the lambda1 = 0 run of the full
    method reproduces the local baseline bit for bit.
    """
    train_idx = client.data.split.train
    features = client.data.graph.features
    for _ in range(cfg.local_epochs):
        tape = Tape()
        leaves = [tape.leaf(a) for a in client.gnn.arrays()]
        params = client.gnn.with_arrays(leaves)
        preds = gnn_forward(params, features, client.adj)
        preds_train = gather_rows(preds, train_idx)
        if teacher is None or cfg.lambda1 == 0.0:
            loss = cross_entropy(client.train_targets, preds_train)
        else:
            loss = gnn_loss(preds_train, client.train_targets, preds, teacher,
                            cfg.lambda1)
        backward(tape, loss)
        grads = [leaf.grad for leaf in leaves]
        new_arrays = adam_step(client.gnn.arrays(), grads, client.gnn_opt,
                               cfg.lr_gnn)
        client.gnn = client.gnn.with_arrays(new_arrays)


def phase1_local(client: ClientState, encoder_global: EncoderParams,
                 proxies_global: StructureProxies, cfg: RunConfig) -> None:
    """Round phase 1: refresh frozen soft targets, then train the GNN.

    Soft targets derive only from the previous round's global encoder and
    proxies; they stay constant across the E epochs.
    """
    graph = client.data.graph
    labeled_mask = np.zeros(graph.n, dtype=bool)
    labeled_mask[client.data.split.train] = True
    _, _, teacher = encoder_soft_targets(encoder_global, proxies_global,
                                         graph.features, graph.labels, labeled_mask)
    client.encoder = encoder_global
    client.proxies = proxies_global
    train_labels = _train_labels(client.data)
    client.node_proxies = proxies_global.rows[train_labels].copy()
    _train_gnn_epochs(client, cfg, teacher)


def phase2_local(client: ClientState, cfg: RunConfig) -> tuple[EncoderParams, StructureProxies]:
    """Round phase 2: train the encoder copy and per-node proxies.

    GNN predictions are computed once from the freshly trained personal
    model and frozen; E epochs then update the encoder (lr_encoder) and the
    per-train-node proxies (lr_proxy). Finally each class row becomes the
    mean of its nodes' proxies; classes absent from this client keep the
    incoming global row.
    """
    graph = client.data.graph
    train_idx = client.data.split.train
    train_labels = _train_labels(client.data)
    feats_train = graph.features[train_idx]
    preds = gnn_forward(client.gnn, graph.features, client.adj)
    yhat_train = value_of(preds)[train_idx]

    encoder = client.encoder
    node_proxies = client.node_proxies
    client.encoder_opt = AdamState.for_params(encoder.arrays())
    client.proxy_opt = AdamState.for_params([node_proxies])
    update_proxies = not cfg.s_zero
    for _ in range(cfg.local_epochs):
        tape = Tape()
        enc_leaves = [tape.leaf(a) for a in encoder.arrays()]
        enc = encoder.with_arrays(enc_leaves)
        if update_proxies:
            proxy_leaf = tape.leaf(node_proxies)
        else:
            proxy_leaf = node_proxies
        e = encoder_embed(enc.w_embed, enc.b_embed, feats_train)
        q = projector_forward(enc.w_proj, enc.b_proj, e)
        p = classifier_with_proxy(enc.w_cls, enc.b_cls, e, proxy_leaf)
        loss = encoder_loss(q, client.train_targets, p, yhat_train, cfg.lambda2)
        backward(tape, loss)
        encoder = encoder.with_arrays(adam_step(
            encoder.arrays(), [leaf.grad for leaf in enc_leaves],
            client.encoder_opt, cfg.lr_encoder))
        if update_proxies:
            (node_proxies,) = adam_step([node_proxies], [proxy_leaf.grad],
                                        client.proxy_opt, cfg.lr_proxy)

    rows = client.proxies.rows.copy()
    if update_proxies:
        for cls in np.unique(train_labels):
            rows[cls] = node_proxies[train_labels == cls].mean(axis=0)
    client.encoder = encoder
    client.node_proxies = node_proxies
    client.proxies = StructureProxies(rows)
    return encoder, client.proxies


def aggregate_encoder(encoders: list[EncoderParams], counts) -> EncoderParams:
    """Node-count weighted average, applied parameter-wise."""
    if not encoders:
        raise ConfigError("nothing to aggregate")
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size != len(encoders) or np.any(counts <= 0):
        raise ConfigError("need one positive count per client encoder")
    shapes = [tuple(a.shape for a in e.arrays()) for e in encoders]
    if any(s != shapes[0] for s in shapes):
        raise ContractError("client encoders drifted in shape")
    weights = counts / counts.sum()
    out = []
    for i in range(len(encoders[0].arrays())):
        acc = weights[0] * encoders[0].arrays()[i]
        for k in range(1, len(encoders)):
            acc = acc + weights[k] * encoders[k].arrays()[i]
        out.append(acc)
    return encoders[0].with_arrays(out)


def align_proxies(client_proxies: list[StructureProxies], ratios: list[Array],
                  previous: StructureProxies) -> StructureProxies:
    """Per-class weighted average with weights a_j^(k) / sum_k a_j^(k).

    A class no client holds keeps its previous global row.
    """
    if len(client_proxies) != len(ratios) or not client_proxies:
        raise ConfigError("need one ratio vector per client proxy matrix")
    rows = previous.rows.copy()
    num_classes = rows.shape[0]
    for j in range(num_classes):
        total = sum(float(r[j]) for r in ratios)
        if total <= 0.0:
            continue
        acc = np.zeros(rows.shape[1])
        for sp, r in zip(client_proxies, ratios):
            weight = float(r[j]) / total
            if weight:
                acc = acc + weight * sp.rows[j]
        rows[j] = acc
    return StructureProxies(rows)


def _aggregate_gnn(params_list: list[GnnParams], counts) -> GnnParams:
    counts = np.asarray(counts, dtype=np.float64)
    weights = counts / counts.sum()
    arrays = []
    for i in range(len(params_list[0].arrays())):
        acc = weights[0] * params_list[0].arrays()[i]
        for k in range(1, len(params_list)):
            acc = acc + weights[k] * params_list[k].arrays()[i]
        arrays.append(acc)
    return params_list[0].with_arrays(arrays)


def _evaluate_client(client: ClientState, params: GnnParams):
    """Metric rows for the validation and test splits (skipping empty ones)."""
    from .harness import evaluate

    preds = value_of(gnn_forward(params, client.data.graph.features, client.adj))
    out = []
    for split_name, idx in (("val", client.data.split.val),
                            ("test", client.data.split.test)):
        if idx.size == 0:
            continue
        metrics = evaluate(preds[idx], client.data.graph.labels[idx],
                           np.arange(idx.size), client.majority_class)
        out.append((split_name, metrics))
    return out


def init_clients(cfg: RunConfig, datasets: list[ClientDataset]) -> tuple[list[ClientState], ServerState]:
    """Seed-deterministic construction of client and server state.

    Seed stream layout: child 0 initializes global state (the encoder, or
    the shared GNN for fedavg); child 1 + k initializes client k's personal
    GNN. The layout does not depend on the method, so runs that share a seed
    share initial personal models.
    """
    if not datasets:
        raise ConfigError("need at least one client dataset")
    num_classes = datasets[0].graph.num_classes
    feature_dim = datasets[0].graph.feature_dim
    for d in datasets:
        if d.graph.num_classes != num_classes or d.graph.feature_dim != feature_dim:
            raise ConfigError("clients disagree on feature or class dimensions")

    children = np.random.SeedSequence(cfg.seed).spawn(1 + len(datasets))
    clients = []
    for i, data in enumerate(datasets):
        rng = np.random.default_rng(children[1 + i])
        gnn = init_gnn_params(cfg.backbone, feature_dim, cfg.hidden_dim,
                              num_classes, rng)
        train_labels = _train_labels(data)
        if train_labels.size == 0:
            raise ConfigError(f"client {data.client_id} has an empty train split")
        majority = int(np.argmax(np.bincount(train_labels, minlength=num_classes)))
        clients.append(ClientState(
            client_id=data.client_id,
            data=data,
            gnn=gnn,
            gnn_opt=AdamState.for_params(gnn.arrays()),
            adj=adjacency_for(cfg.backbone, data.graph),
            train_targets=one_hot(train_labels, num_classes),
            majority_class=majority,
        ))

    rng0 = np.random.default_rng(children[0])
    encoder = None
    proxies = None
    if cfg.method == "fedspray":
        encoder = init_encoder_params(feature_dim, cfg.proxy_dim, num_classes, rng0)
        proxies = StructureProxies.zeros(num_classes, cfg.proxy_dim)
    counts = np.array([c.data.graph.n for c in clients], dtype=np.float64)
    ratios = np.stack([class_ratios(c.data, num_classes) for c in clients])
    server = ServerState(encoder=encoder, proxies=proxies,
                         node_counts=counts, class_ratios=ratios)
    return clients, server


def _map_clients(fn, clients, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def run(cfg: RunConfig, datasets: list[ClientDataset], threads: int = 1,
        capture_theta: bool = False, load_state: dict | None = None) -> RunResult:
    """Execute R federated rounds and report metric history.

    The reported test metrics come from the round with the best mean
    validation accuracy (earliest round on ties).
    """
    clients, server = init_clients(cfg, datasets)
    if load_state:
        _apply_checkpoint_state(cfg, clients, server, load_state)

    rows: list[MetricRow] = []
    theta_history: list[list[list[Array]]] | None = [] if capture_theta else None
    round_val: list[float] = []
    round_test: list[tuple[float, float | None]] = []

    global_gnn = None
    if cfg.method == "fedavg":
        # the shared model starts from the global seed stream
        rng0 = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        global_gnn = init_gnn_params(cfg.backbone, datasets[0].graph.feature_dim,
                                     cfg.hidden_dim, datasets[0].graph.num_classes,
                                     rng0)

    for rnd in range(1, cfg.rounds + 1):
        if cfg.method == "fedspray":
            enc_prev, prox_prev = server.encoder, server.proxies

            def client_round(client):
                phase1_local(client, enc_prev, prox_prev, cfg)
                return phase2_local(client, cfg)

            uploads = _map_clients(client_round, clients, threads)
            server.encoder = aggregate_encoder([u[0] for u in uploads],
                                               server.node_counts)
            if cfg.s_zero:
                server.proxies = prox_prev  # pinned at zero
            else:
                server.proxies = align_proxies([u[1] for u in uploads],
                                               list(server.class_ratios), prox_prev)
            eval_params = {c.client_id: c.gnn for c in clients}
        elif cfg.method == "fedavg":
            shared = global_gnn

            def client_round(client):
                client.gnn = shared.with_arrays([a.copy() for a in shared.arrays()])
                client.gnn_opt = AdamState.for_params(client.gnn.arrays())
                _train_gnn_epochs(client, cfg, teacher=None)
                return client.gnn

            locals_ = _map_clients(client_round, clients, threads)
            global_gnn = _aggregate_gnn(locals_, server.node_counts)
            eval_params = {c.client_id: global_gnn for c in clients}
        else:  # local
            def client_round(client):
                _train_gnn_epochs(client, cfg, teacher=None)

            _map_clients(client_round, clients, threads)
            eval_params = {c.client_id: c.gnn for c in clients}

        val_accs = []
        test_overall = []
        test_minority = []
        for client in clients:
            for split_name, metrics in _evaluate_client(client, eval_params[client.client_id]):
                rows.append(MetricRow(round=rnd, client=client.client_id,
                                      split=split_name, overall=metrics.overall,
                                      minority=metrics.minority))
                if split_name == "val":
                    val_accs.append(metrics.overall)
                else:
                    test_overall.append(metrics.overall)
                    if metrics.minority is not None:
                        test_minority.append(metrics.minority)
        round_val.append(float(np.mean(val_accs)) if val_accs else float("nan"))
        round_test.append((
            float(np.mean(test_overall)) if test_overall else float("nan"),
            float(np.mean(test_minority)) if test_minority else None,
        ))
        if capture_theta:
            theta_history.append([[a.copy() for a in c.gnn.arrays()] for c in clients])

    if np.all(np.isnan(round_val)):
        best_idx = len(round_val) - 1
    else:
        best_idx = int(np.nanargmax(round_val))
    best_overall, best_minority = round_test[best_idx]
    return RunResult(rows=rows, best_round=best_idx + 1, test_overall=best_overall,
                     test_minority=best_minority, server=server, clients=clients,
                     theta_history=theta_history)


def checkpoint_state(cfg: RunConfig, result: RunResult) -> dict[str, Array]:
    """Named-array snapshot of trainable state after a run."""
    named: dict[str, Array] = {}
    if result.server.encoder is not None:
        enc = result.server.encoder
        for name, arr in zip(("w_embed", "b_embed", "w_cls", "b_cls", "w_proj", "b_proj"),
                             enc.arrays()):
            named[f"encoder/{name}"] = arr
    if result.server.proxies is not None:
        named["proxies/rows"] = result.server.proxies.rows
    for client in result.clients:
        for i, arr in enumerate(client.gnn.arrays()):
            named[f"client/{client.client_id}/gnn/{i}"] = arr
    return named


def _apply_checkpoint_state(cfg: RunConfig, clients: list[ClientState],
                            server: ServerState, named: dict[str, Array]) -> None:
    if server.encoder is not None:
        keys = ("w_embed", "b_embed", "w_cls", "b_cls", "w_proj", "b_proj")
        if all(f"encoder/{k}" in named for k in keys):
            server.encoder = server.encoder.with_arrays(
                [np.asarray(named[f"encoder/{k}"], dtype=np.float64) for k in keys])
    if server.proxies is not None and "proxies/rows" in named:
        server.proxies = StructureProxies(named["proxies/rows"])
    for client in clients:
        prefix = f"client/{client.client_id}/gnn/"
        arrays = client.gnn.arrays()
        loaded = []
        for i, current in enumerate(arrays):
            key = f"{prefix}{i}"
            if key not in named:
                loaded = None
                break
            arr = np.asarray(named[key], dtype=np.float64)
            if arr.shape != current.shape:
                raise ConfigError(f"checkpoint array {key} has shape {arr.shape}, "
                                  f"expected {current.shape}")
            loaded.append(arr)
        if loaded is not None:
            client.gnn = client.gnn.with_arrays(loaded)
