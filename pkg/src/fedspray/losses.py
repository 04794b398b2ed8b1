"""Training objectives for the GNN side and the encoder side.

Both composite losses pair a cross-entropy term with a KL knowledge-
distillation term. The KL direction differs between the two: the GNN is
pulled toward the encoder's soft targets, KL(p || yhat), while the encoder's
targets are pulled toward the GNN's predictions, KL(yhat || p). In either
case the teacher is passed as a plain (untracked) matrix so no gradient can
reach it; probabilities are clipped at 1e-12 before any logarithm. All terms
are means over their node sets.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .numcore import Var, add, log_clipped, mul, scale, sum_all, value_of

ROW_SUM_TOL = 1e-6


def _require_row_stochastic(m, what: str) -> None:
    v = value_of(m)
    if np.any(v < -1e-12):
        raise ContractError(f"{what} has negative entries")
    if np.max(np.abs(v.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise ContractError(f"{what} rows must sum to 1")


def cross_entropy(targets, predictions):
    """Mean over rows of -sum_c y_c log yhat_c; targets are one-hot rows."""
    tv, pv = value_of(targets), value_of(predictions)
    if tv.shape != pv.shape:
        raise ShapeError(f"cross_entropy: {tv.shape} vs {pv.shape}")
    _require_row_stochastic(predictions, "prediction matrix")
    n = tv.shape[0]
    return scale(sum_all(mul(targets, log_clipped(predictions))), -1.0 / n)


def kl_divergence(teacher, student):
    """Mean over rows of sum_c t_c log(t_c / s_c).

    Asymmetric by design; callers choose which distribution teaches.
    """
    tv, sv = value_of(teacher), value_of(student)
    if tv.shape != sv.shape:
        raise ShapeError(f"kl_divergence: {tv.shape} vs {sv.shape}")
    _require_row_stochastic(teacher, "teacher matrix")
    _require_row_stochastic(student, "student matrix")
    n = tv.shape[0]
    entropy = mul(teacher, log_clipped(teacher))
    cross = scale(mul(teacher, log_clipped(student)), -1.0)
    return scale(sum_all(add(entropy, cross)), 1.0 / n)


def gnn_loss(predictions_labeled, targets_labeled, predictions_all,
             teacher_all, kd_weight: float):
    """CE over labeled nodes plus kd_weight * KL(teacher || predictions).

    The KD term runs over every node (labeled or not); the teacher must be a
    constant. With kd_weight == 0 the KD term is skipped entirely so the loss
    and its gradients coincide exactly with plain individual CE training.
    """
    if isinstance(teacher_all, Var):
        raise ContractError("teacher soft targets must be untracked constants")
    teacher_all = value_of(teacher_all)
    if value_of(predictions_all).shape != teacher_all.shape:
        raise ContractError("teacher must cover every node")
    ce = cross_entropy(targets_labeled, predictions_labeled)
    if kd_weight == 0.0:
        return ce
    return add(ce, scale(kl_divergence(teacher_all, predictions_all), kd_weight))


def encoder_loss(soft_labels_labeled, targets_labeled, soft_targets_labeled,
                 gnn_preds_labeled, kd_weight: float):
    """CE(y, q) plus kd_weight * KL(yhat || p), all over labeled nodes.

    ``gnn_preds_labeled`` is the frozen teacher; gradients flow into the
    projector output q and the proxy-conditioned soft targets p.
    """
    if isinstance(gnn_preds_labeled, Var):
        raise ContractError("GNN predictions must be untracked constants here")
    gnn_preds_labeled = value_of(gnn_preds_labeled)
    n = value_of(targets_labeled).shape[0]
    for name, m in (("soft labels", soft_labels_labeled),
                    ("soft targets", soft_targets_labeled)):
        if value_of(m).shape[0] != n:
            raise ContractError(f"{name} must cover exactly the labeled nodes")
    if gnn_preds_labeled.shape[0] != n:
        raise ContractError("GNN predictions must cover exactly the labeled nodes")
    ce = cross_entropy(targets_labeled, soft_labels_labeled)
    if kd_weight == 0.0:
        return ce
    kd = kl_divergence(gnn_preds_labeled, soft_targets_labeled)
    return add(ce, scale(kd, kd_weight))
