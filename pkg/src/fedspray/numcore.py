"""Dense/sparse matrix arithmetic with reverse-mode automatic differentiation.

All values are 64-bit float, 2-D, row-major numpy arrays. Tracked values are
``Var`` nodes recorded on a ``Tape`` in execution order (define-by-run), which
is already a topological order, so the backward pass is a single reverse
traversal. Every public operation checks its output for NaN/Inf so nothing
non-finite can propagate silently.

Ops accept either a ``Var`` or a plain array; the result is tracked exactly
when at least one input is tracked. Adjacency matrices (``SparseAdj``) are
always constants: gradients never flow through graph structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ShapeError, ValidationError

Array = np.ndarray

LOG_FLOOR = 1e-12


def as_matrix(value) -> Array:
    """Coerce to a 2-D float64 C-contiguous array."""
    a = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def _check_finite(a: Array) -> Array:
    if not np.all(np.isfinite(a)):
        raise ValidationError("non-finite value produced by a matrix operation")
    return a


class Var:
    """A tracked matrix: value plus a gradient buffer filled by backward()."""

    __slots__ = ("value", "grad", "inputs", "vjps", "is_leaf", "tape")

    def __init__(self, value: Array, inputs, vjps, is_leaf: bool, tape: "Tape"):
        self.value = value
        self.grad: Array | None = None
        self.inputs = inputs  # tuple of parent Vars
        self.vjps = vjps      # tuple of callables: output-grad -> input-grad
        self.is_leaf = is_leaf
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Execution-ordered record of tracked operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value) -> Var:
        """Register a parameter leaf; its gradient is populated by backward()."""
        node = Var(_check_finite(as_matrix(value)), (), (), is_leaf=True, tape=self)
        self.nodes.append(node)
        return node

    def _record(self, value: Array, inputs, vjps) -> Var:
        node = Var(value, tuple(inputs), tuple(vjps), is_leaf=False, tape=self)
        self.nodes.append(node)
        return node

    def leaves(self) -> list[Var]:
        return [n for n in self.nodes if n.is_leaf]


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else as_matrix(x)


def _emit(out: Array, tracked: list[tuple[Var, object]]) -> Var | Array:
    """Record ``out`` if any input was tracked, else return the raw array."""
    _check_finite(out)
    if not tracked:
        return out
    tape = tracked[0][0].tape
    inputs = tuple(v for v, _ in tracked)
    vjps = tuple(f for _, f in tracked)
    return tape._record(out, inputs, vjps)


def matmul(a, b):
    """Standard matrix product a @ b."""
    av, bv = value_of(a), value_of(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} x {bv.shape}")
    out = av @ bv
    tracked = []
    if isinstance(a, Var):
        tracked.append((a, lambda g, bv=bv: g @ bv.T))
    if isinstance(b, Var):
        tracked.append((b, lambda g, av=av: av.T @ g))
    return _emit(out, tracked)


def add(a, b):
    """Elementwise sum; also accepts a 1 x d row bias against an n x d matrix."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        if not (bv.shape == (1, av.shape[1]) or av.shape == (1, bv.shape[1])):
            raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    out = av + bv

    def reduce_to(shape):
        def vjp(g, shape=shape):
            if g.shape == shape:
                return g
            return g.sum(axis=0, keepdims=True)
        return vjp

    tracked = []
    if isinstance(a, Var):
        tracked.append((a, reduce_to(av.shape)))
    if isinstance(b, Var):
        tracked.append((b, reduce_to(bv.shape)))
    return _emit(out, tracked)


def scale(a, c: float):
    """Multiply every entry by the scalar c."""
    av = value_of(a)
    c = float(c)
    out = av * c
    tracked = []
    if isinstance(a, Var):
        tracked.append((a, lambda g, c=c: g * c))
    return _emit(out, tracked)


def mul(a, b):
    """Elementwise (Hadamard) product of same-shape matrices."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul: incompatible shapes {av.shape} and {bv.shape}")
    out = av * bv
    tracked = []
    if isinstance(a, Var):
        tracked.append((a, lambda g, bv=bv: g * bv))
    if isinstance(b, Var):
        tracked.append((b, lambda g, av=av: g * av))
    return _emit(out, tracked)


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    tracked = []
    if isinstance(x, Var):
        tracked.append((x, lambda g, xv=xv: g * (xv > 0.0)))
    return _emit(out, tracked)


def log_clipped(x, floor: float = LOG_FLOOR):
    """log(max(x, floor)); gradient is zero where the clip is active."""
    xv = value_of(x)
    clipped = np.maximum(xv, floor)
    out = np.log(clipped)
    tracked = []
    if isinstance(x, Var):
        tracked.append((x, lambda g, xv=xv, clipped=clipped, floor=floor:
                        g * np.where(xv > floor, 1.0 / clipped, 0.0)))
    return _emit(out, tracked)


def concat_cols(a, b):
    """Stack two matrices with equal row counts side by side."""
    av, bv = value_of(a), value_of(b)
    if av.shape[0] != bv.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {av.shape} vs {bv.shape}")
    out = np.concatenate([av, bv], axis=1)
    na = av.shape[1]
    tracked = []
    if isinstance(a, Var):
        tracked.append((a, lambda g, na=na: np.ascontiguousarray(g[:, :na])))
    if isinstance(b, Var):
        tracked.append((b, lambda g, na=na: np.ascontiguousarray(g[:, na:])))
    return _emit(out, tracked)


def gather_rows(x, idx):
    """Select rows x[idx]; the backward pass scatter-adds (idx may repeat)."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= xv.shape[0]):
        raise ContractError("gather_rows: index out of range")
    out = xv[idx]

    def vjp(g, idx=idx, shape=xv.shape):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    tracked = []
    if isinstance(x, Var):
        tracked.append((x, vjp))
    return _emit(out, tracked)


def sum_all(x):
    """Reduce to a 1 x 1 matrix holding the sum of all entries."""
    xv = value_of(x)
    out = np.array([[xv.sum()]])
    tracked = []
    if isinstance(x, Var):
        tracked.append((x, lambda g, shape=xv.shape: np.full(shape, g[0, 0])))
    return _emit(out, tracked)


def row_softmax(logits):
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    xv = value_of(logits)
    _check_finite(xv)
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g, out=out):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    tracked = []
    if isinstance(logits, Var):
        tracked.append((logits, vjp))
    return _emit(out, tracked)


@dataclass
class SparseAdj:
    """Symmetric-pattern CSR adjacency over ``n`` nodes.

    Column indices are sorted within each row. ``weights`` aligns with
    ``indices``. Stored graphs keep weight symmetry as well; row-normalized
    adjacencies keep only pattern symmetry.
    """

    indptr: Array
    indices: Array
    weights: Array
    n: int
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)
    _csr_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indptr.shape != (self.n + 1,):
            raise ShapeError("SparseAdj: indptr length must be n + 1")
        if np.any(np.diff(self.indptr) < 0):
            raise ValidationError("SparseAdj: row offsets must be non-decreasing")
        if self.indices.shape != self.weights.shape:
            raise ShapeError("SparseAdj: indices and weights must align")
        for i in range(self.n):
            row = self.indices[self.indptr[i]:self.indptr[i + 1]]
            if row.size and np.any(np.diff(row) <= 0):
                raise ValidationError(f"SparseAdj: row {i} column indices must be strictly increasing")

    @classmethod
    def from_edges(cls, n: int, edges, weights=None) -> SparseAdj:
        """Build from undirected edges (u, v), u != v, each pair given once."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValidationError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValidationError("self-loops are not allowed in stored graphs")
        if weights is None:
            weights = np.ones(edges.shape[0])
        weights = np.asarray(weights, dtype=np.float64)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        vals = np.concatenate([weights, weights])
        csr = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.nnz != 2 * edges.shape[0]:
            raise ValidationError("duplicate edges in input")
        return cls(csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                   csr.data.astype(np.float64), n)

    @classmethod
    def from_csr(cls, csr: sp.csr_matrix) -> SparseAdj:
        csr = csr.tocsr()
        csr.sort_indices()
        return cls(csr.indptr.astype(np.int64), csr.indices.astype(np.int64),
                   csr.data.astype(np.float64), csr.shape[0])

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.weights, self.indices, self.indptr),
                                      shape=(self.n, self.n))
        return self._csr

    def csr_transpose(self) -> sp.csr_matrix:
        if self._csr_t is None:
            self._csr_t = self.csr().T.tocsr()
        return self._csr_t

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def degrees(self) -> Array:
        """Number of stored entries per row."""
        return np.diff(self.indptr)

    def row_sums(self) -> Array:
        return np.asarray(self.csr().sum(axis=1)).reshape(-1)

    def neighbors(self, v: int) -> Array:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def to_dense(self) -> Array:
        return self.csr().toarray()

    def check_symmetric(self, check_weights: bool = True, tol: float = 0.0) -> None:
        """Raise unless (i, j) implies (j, i); optionally with equal weight."""
        a = self.csr()
        d = (a - a.T) if check_weights else (a != 0).astype(np.int8) - (a.T != 0).astype(np.int8)
        if d.nnz and np.max(np.abs(d.data)) > tol:
            raise ValidationError("adjacency is not symmetric")


def spmm(adj: SparseAdj, x):
    """Sparse @ dense: row i of the result is sum_j w_ij * x_j.

    The adjacency is a constant; gradients flow only into x.
    """
    xv = value_of(x)
    if adj.n != xv.shape[0]:
        raise ShapeError(f"spmm: adjacency over {adj.n} nodes vs {xv.shape[0]} feature rows")
    out = adj.csr() @ xv
    tracked = []
    if isinstance(x, Var):
        tracked.append((x, lambda g, t=adj.csr_transpose(): t @ g))
    return _emit(out, tracked)


def backward(tape: Tape, output: Var) -> dict[int, Array]:
    """Accumulate d(output)/d(leaf) for every leaf on the tape.

    ``output`` must be a recorded 1 x 1 matrix. After the call every leaf's
    ``grad`` buffer is populated (zeros for leaves the output does not
    depend on). Returns a map from ``id(leaf)`` to its gradient.
    """
    if not isinstance(output, Var):
        raise ContractError("backward: output must be a tracked Var")
    if output.value.shape != (1, 1):
        raise ContractError(f"backward: output must be scalar (1x1), got {output.value.shape}")
    for node in tape.nodes:
        node.grad = None
    output.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.inputs, node.vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    grads: dict[int, Array] = {}
    for leaf in tape.leaves():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        grads[id(leaf)] = leaf.grad
    return grads


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list[Array]
    v: list[Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Array], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: list[Array], grads: list[Array], state: AdamState,
              lr: float) -> list[Array]:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    if lr <= 0:
        raise ContractError("adam_step: learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: parameter/gradient/state lengths differ")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {i} shape {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        out.append(_check_finite(p - lr * m_hat / (np.sqrt(v_hat) + eps)))
    return out


def finite_diff_check(loss_fn, params: list[Array], step: float = 1e-5,
                      samples_per_param: int = 6, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a list of matrices (as tape Vars) to a scalar Var on the
    same tape. Returns the maximum over sampled coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    params = [as_matrix(p) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    out = loss_fn(leaves)
    backward(tape, out)
    analytic = [leaf.grad for leaf in leaves]

    def eval_at(values: list[Array]) -> float:
        t = Tape()
        return float(value_of(loss_fn([t.leaf(v) for v in values]))[0, 0])

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, p in enumerate(params):
        if p.size == 0:
            continue
        k = min(samples_per_param, p.size)
        coords = rng.choice(p.size, size=k, replace=False)
        for c in coords:
            idx = np.unravel_index(c, p.shape)
            bumped = [q.copy() for q in params]
            bumped[i][idx] += step
            hi = eval_at(bumped)
            bumped[i][idx] -= 2.0 * step
            lo = eval_at(bumped)
            numeric = (hi - lo) / (2.0 * step)
            err = abs(analytic[i][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def one_hot(labels, num_classes: int) -> Array:
    """Rows of the identity selected by integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError("one_hot: label out of range")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
