"""GNN backbones, the feature-structure encoder, and structure proxies.

Every forward function accepts parameter fields that are either plain arrays
(fast, untracked evaluation) or tape Vars (training), and returns row-softmax
predictions. All models are two-layer with hidden width ``hidden_dim``;
encoder components are single affine layers. The fusion of feature embedding
and structure proxy is elementwise addition, so ``proxy_dim`` doubles as the
embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .graphcore import Graph, normalized_adjacency
from .numcore import (
    Array,
    SparseAdj,
    add,
    concat_cols,
    matmul,
    relu,
    row_softmax,
    spmm,
    value_of,
)

BACKBONES = ("gcn", "sgc", "sage", "mlp")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GnnParams:
    """Weight/bias pairs for one backbone; ``layers`` ordering is fixed."""

    backbone: str
    layers: list  # [(W, b), ...]
    hidden_dim: int

    def arrays(self) -> list:
        return [t for pair in self.layers for t in pair]

    def with_arrays(self, arrays: list) -> "GnnParams":
        it = iter(arrays)
        layers = [(next(it), next(it)) for _ in self.layers]
        return replace(self, layers=layers)


@dataclass
class EncoderParams:
    """Embedding layer, proxy-conditioned classifier, feature-only projector.

    The classifier and projector share shapes by construction.
    """

    w_embed: Array
    b_embed: Array
    w_cls: Array
    b_cls: Array
    w_proj: Array
    b_proj: Array

    def arrays(self) -> list:
        return [self.w_embed, self.b_embed, self.w_cls, self.b_cls,
                self.w_proj, self.b_proj]

    def with_arrays(self, arrays: list) -> "EncoderParams":
        return EncoderParams(*arrays)


@dataclass
class StructureProxies:
    """One latent row per class, shared across clients after alignment."""

    rows: Array  # (num_classes, proxy_dim)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or not np.all(np.isfinite(self.rows)):
            raise ShapeError("proxies must be a finite (num_classes, proxy_dim) matrix")

    @classmethod
    def zeros(cls, num_classes: int, proxy_dim: int) -> "StructureProxies":
        return cls(rows=np.zeros((num_classes, proxy_dim)))


def init_gnn_params(backbone: str, feature_dim: int, hidden_dim: int,
                    num_classes: int, rng: np.random.Generator) -> GnnParams:
    """Two-layer parameters, uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    if backbone not in BACKBONES:
        raise ConfigError(f"unknown backbone {backbone!r}")
    if backbone == "sgc":
        layers = [(_uniform_init(rng, feature_dim, (feature_dim, num_classes)),
                   _uniform_init(rng, feature_dim, (1, num_classes)))]
    elif backbone == "sage":
        layers = [
            (_uniform_init(rng, 2 * feature_dim, (2 * feature_dim, hidden_dim)),
             _uniform_init(rng, 2 * feature_dim, (1, hidden_dim))),
            (_uniform_init(rng, 2 * hidden_dim, (2 * hidden_dim, num_classes)),
             _uniform_init(rng, 2 * hidden_dim, (1, num_classes))),
        ]
    else:  # gcn, mlp
        layers = [
            (_uniform_init(rng, feature_dim, (feature_dim, hidden_dim)),
             _uniform_init(rng, feature_dim, (1, hidden_dim))),
            (_uniform_init(rng, hidden_dim, (hidden_dim, num_classes)),
             _uniform_init(rng, hidden_dim, (1, num_classes))),
        ]
    return GnnParams(backbone=backbone, layers=layers, hidden_dim=hidden_dim)


def init_encoder_params(feature_dim: int, proxy_dim: int, num_classes: int,
                        rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(
        w_embed=_uniform_init(rng, feature_dim, (feature_dim, proxy_dim)),
        b_embed=_uniform_init(rng, feature_dim, (1, proxy_dim)),
        w_cls=_uniform_init(rng, proxy_dim, (proxy_dim, num_classes)),
        b_cls=_uniform_init(rng, proxy_dim, (1, num_classes)),
        w_proj=_uniform_init(rng, proxy_dim, (proxy_dim, num_classes)),
        b_proj=_uniform_init(rng, proxy_dim, (1, num_classes)),
    )


def adjacency_for(backbone: str, graph: Graph) -> SparseAdj | None:
    """The propagation operator each backbone expects (None for mlp)."""
    if backbone in ("gcn", "sgc"):
        return normalized_adjacency(graph, "sym_selfloop")
    if backbone == "sage":
        return normalized_adjacency(graph, "mean_rowstoch")
    if backbone == "mlp":
        return None
    raise ConfigError(f"unknown backbone {backbone!r}")


def gnn_forward(params: GnnParams, features, adj: SparseAdj | None):
    """Row-softmax class predictions for every node.

    gcn:  softmax(A(relu(A X W1 + b1)) W2 + b2)
    sgc:  softmax(A^2 X W + b)
    sage: per layer, concat(self, mean-neighbor) -> affine; relu between
    mlp:  softmax(relu(X W1 + b1) W2 + b2), ignoring the graph entirely
    """
    backbone = params.backbone
    if backbone == "mlp":
        (w1, b1), (w2, b2) = params.layers
        hidden = relu(add(matmul(features, w1), b1))
        return row_softmax(add(matmul(hidden, w2), b2))
    if adj is None:
        raise ContractError(f"backbone {backbone!r} needs an adjacency")
    if backbone == "gcn":
        (w1, b1), (w2, b2) = params.layers
        hidden = relu(add(matmul(spmm(adj, features), w1), b1))
        return row_softmax(add(matmul(spmm(adj, hidden), w2), b2))
    if backbone == "sgc":
        ((w, b),) = params.layers
        propagated = spmm(adj, spmm(adj, features))
        return row_softmax(add(matmul(propagated, w), b))
    if backbone == "sage":
        (w1, b1), (w2, b2) = params.layers
        h = relu(add(matmul(concat_cols(features, spmm(adj, features)), w1), b1))
        out = add(matmul(concat_cols(h, spmm(adj, h)), w2), b2)
        return row_softmax(out)
    raise ConfigError(f"unknown backbone {backbone!r}")


def encoder_embed(w_embed, b_embed, features):
    """Latent feature embeddings e = relu(X W + b)."""
    return relu(add(matmul(features, w_embed), b_embed))


def projector_forward(w_proj, b_proj, embeddings):
    """Feature-only soft labels q = softmax(e W + b)."""
    return row_softmax(add(matmul(embeddings, w_proj), b_proj))


def proxy_lookup(proxies, labels, soft_labels, labeled_mask) -> Array:
    """Per-node structure proxies.

    A labeled node gets its class row; an unlabeled node gets the soft-label
    weighted average of the rows. Only used with constant (untracked) inputs:
    the per-node proxy working set during training is a parameter on its own.
    """
    rows = value_of(proxies.rows if isinstance(proxies, StructureProxies) else proxies)
    q = value_of(soft_labels)
    labels = np.asarray(labels, dtype=np.int64)
    labeled_mask = np.asarray(labeled_mask, dtype=bool)
    n = labels.size
    if q.shape != (n, rows.shape[0]):
        raise ShapeError(f"soft labels must be {n} x {rows.shape[0]}")
    if np.any((labels[labeled_mask] < 0) | (labels[labeled_mask] >= rows.shape[0])):
        raise ContractError("labeled node with out-of-range class")
    out = q @ rows
    idx = np.flatnonzero(labeled_mask)
    out[idx] = rows[labels[idx]]
    return out


def classifier_with_proxy(w_cls, b_cls, embeddings, node_proxies):
    """Soft targets p = softmax((e + s) W + b)."""
    ev, sv = value_of(embeddings), value_of(node_proxies)
    if ev.shape != sv.shape:
        raise ShapeError(f"embedding/proxy width mismatch: {ev.shape} vs {sv.shape}")
    return row_softmax(add(matmul(add(embeddings, node_proxies), w_cls), b_cls))


def encoder_soft_targets(enc: EncoderParams, proxies: StructureProxies,
                         features: Array, labels: Array,
                         labeled_mask: Array) -> tuple[Array, Array, Array]:
    """Constant forward pass: embeddings, soft labels q, soft targets p.

    Used at the start of each round to freeze the teacher distribution.
    """
    e = encoder_embed(enc.w_embed, enc.b_embed, features)
    q = projector_forward(enc.w_proj, enc.b_proj, e)
    s = proxy_lookup(proxies, labels, q, labeled_mask)
    p = classifier_with_proxy(enc.w_cls, enc.b_cls, e, s)
    return value_of(e), value_of(q), value_of(p)
