"""Contrastive, supervised and pseudo-label losses.

All losses take unit-norm embeddings (arrays or traced ``Var`` objects) and
return a scalar. Inputs are validated, never normalised here: normalisation
belongs to the encoder and the support set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .support_set import SupportSet

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6
PROB_TOL = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lambda_self: float = 1.0
    rho: float = 0.9
    k_pseudo: int = 1
    use_label_aware: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_self < 0:
            raise ValueError("lambda_self must be non-negative")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if self.k_pseudo < 1:
            raise ValueError("k_pseudo must be at least 1")


@dataclass
class ContrastiveBatch:
    """Anchors, index-paired positives and per-anchor negative sets."""

    anchors: list
    positives: list
    negatives: list | None = None
    labels: list | None = None

    def __post_init__(self):
        if len(self.anchors) != len(self.positives):
            raise ValueError("anchors and positives differ in length")
        if self.negatives is None:
            self.negatives = [[] for _ in self.anchors]
        if len(self.negatives) != len(self.anchors):
            raise ValueError("need one negative set per anchor")

    @property
    def M(self) -> int:
        return len(self.anchors)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


def check_unit(*tensors, tol: float = UNIT_TOL) -> None:
    for t in tensors:
        v = dc.value_of(t)
        if v.size == 0:
            continue
        dev = np.max(np.abs(np.linalg.norm(np.atleast_2d(v), axis=-1) - 1.0))
        if dev > tol:
            raise ValueError(f"expected unit-norm embeddings, norm deviates from 1 by {dev:.3g}")


def _rows(x):
    """Stack a list of vectors into a matrix; arrays and Vars pass through."""
    if not isinstance(x, (list, tuple)):
        return x
    if len(x) == 0:
        return np.zeros((0, 0))
    if any(isinstance(e, dc.Var) for e in x):
        return dc.concatenate([dc.reshape(e, (1, -1)) for e in x])
    return np.stack([np.asarray(e, dtype=np.float64) for e in x])


def info_nce(z, z_pos, negatives, tau: float = 0.1):
    """-log softmax of the positive logit against the negatives."""
    _check_tau(tau)
    negatives = _rows(negatives)
    check_unit(z, z_pos, negatives)
    pos = dc.reshape(dc.dot(z, z_pos), (1,))
    if dc.value_of(negatives).size == 0:
        logits = dc.scale(pos, 1.0 / tau)
    else:
        logits = dc.scale(dc.concatenate([pos, dc.matmul(negatives, z)]), 1.0 / tau)
    return dc.sub(dc.logsumexp(logits), dc.take(logits, 0))


def info_nce_batch(batch: ContrastiveBatch, tau: float = 0.1):
    """Mean of per-sample InfoNCE losses over the batch."""
    if batch.M == 0:
        raise ValueError("empty batch")
    terms = [info_nce(z, p, n, tau) for z, p, n in zip(batch.anchors, batch.positives, batch.negatives)]
    if any(isinstance(t, dc.Var) for t in terms):
        return dc.mean(dc.concatenate([dc.reshape(t, (1,)) for t in terms]))
    return dc.mean(np.array(terms))


def _simclr_form(anchors, positives, tau):
    logits = dc.scale(dc.matmul(anchors, dc.transpose(positives)), 1.0 / tau)
    n = dc.value_of(logits).shape[0]
    per_anchor = dc.sub(dc.logsumexp(logits, axis=1), dc.pick(logits, np.arange(n)))
    return dc.mean(per_anchor)


def simclr_loss(anchors, positives, tau: float = 0.1):
    """Each anchor's own positive against all positives in the batch."""
    _check_tau(tau)
    anchors, positives = _rows(anchors), _rows(positives)
    a, p = dc.value_of(anchors), dc.value_of(positives)
    if a.shape != p.shape:
        raise ValueError(f"anchors {a.shape} and positives {p.shape} differ in shape")
    if len(a) == 0:
        raise ValueError("empty batch")
    check_unit(anchors, positives)
    return _simclr_form(anchors, positives, tau)


def nnclr_loss(
    anchors,
    positives,
    support: SupportSet,
    tau: float = 0.1,
    labels=None,
    config: LossConfig | None = None,
    return_neighbors: bool = False,
):
    """SimCLR form with each anchor replaced by its support-set nearest neighbour.

    ``positives`` are the prediction-head outputs p+ = g(z+). Neighbours are
    constants: no gradient reaches the support set or flows back through the
    anchor branch. With ``config.use_label_aware`` a labeled anchor only
    matches same-label or unlabeled entries.
    """
    _check_tau(tau)
    if len(support) == 0:
        raise ValueError("support set is empty")
    anchors, positives = _rows(anchors), _rows(positives)
    a, p = dc.value_of(anchors), dc.value_of(positives)
    if a.shape != p.shape or len(a) == 0:
        raise ValueError(f"anchors {a.shape} and positives {p.shape} must be equal, non-empty")
    check_unit(anchors, positives)
    label_aware = config.use_label_aware if config is not None else True
    pos, fallback = support.select_neighbors(a, labels, label_aware=label_aware)
    nn = support.embeddings[pos[:, 0]]
    loss = _simclr_form(nn, positives, tau)
    if return_neighbors:
        return loss, pos[:, 0], fallback
    return loss


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of integer ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    lv = dc.value_of(logits)
    if lv.ndim == 1:
        logits = dc.reshape(logits, (1, -1))
        targets = targets.reshape(1)
    if np.any(targets < 0) or np.any(targets >= dc.value_of(logits).shape[1]):
        raise ValueError("target outside the classifier's classes")
    per = dc.sub(dc.logsumexp(logits, axis=1), dc.pick(logits, targets))
    return dc.mean(per)


def scl_loss(anchors, anchor_labels, pool, pool_labels, tau: float = 0.1):
    """Supervised contrastive loss over a labeled pool.

    Each anchor averages ``-log softmax`` over the pool entries sharing its
    label; anchors with no such entry contribute 0.
    """
    _check_tau(tau)
    anchors, pool = _rows(anchors), _rows(pool)
    if dc.value_of(pool).size == 0:
        raise ValueError("empty pool")
    check_unit(anchors, pool)
    al = np.asarray(anchor_labels)
    pl = np.asarray(pool_labels)
    logits = dc.scale(dc.matmul(anchors, dc.transpose(pool)), 1.0 / tau)
    lse = dc.reshape(dc.logsumexp(logits, axis=1), (-1, 1))
    same = (al[:, None] == pl[None, :]).astype(np.float64)
    counts = same.sum(axis=1)
    weights = same / np.maximum(counts, 1.0)[:, None]
    per_anchor = dc.sum(dc.mul(dc.sub(lse, logits), weights), axis=1)
    return dc.mean(per_anchor)


def ncl_loss(anchors, views, support: SupportSet, hard_negatives=None, tau: float = 0.1, k_pseudo: int = 1):
    """Neighbourhood contrastive loss for unlabeled anchors.

    Term 1 contrasts ``z_i`` with its correlated view; term 2 averages the
    same contrast over the ``k_pseudo`` nearest support entries. Both use the
    other batch views plus ``hard_negatives`` as negatives. The loss is the
    batch mean of (term1 + term2) / 2.
    """
    _check_tau(tau)
    if len(support) == 0:
        raise ValueError("support set is empty")
    anchors, views = _rows(anchors), _rows(views)
    a = dc.value_of(anchors)
    if a.shape != dc.value_of(views).shape or len(a) == 0:
        raise ValueError("anchors and views must be equal, non-empty")
    check_unit(anchors, views)
    b = len(a)
    if hard_negatives is not None and dc.value_of(_rows(hard_negatives)).size:
        hard_negatives = _rows(hard_negatives)
        check_unit(hard_negatives)
        columns = dc.concatenate([views, hard_negatives])
    else:
        columns = views
    n_cols = dc.value_of(columns).shape[0]
    if k_pseudo > len(support):
        log.warning("support holds %d entries, fewer than k_pseudo=%d; using all", len(support), k_pseudo)
    pos, _ = support.select_neighbors(a, label_aware=False, k=k_pseudo)
    k = pos.shape[1]

    logits = dc.scale(dc.matmul(anchors, dc.transpose(columns)), 1.0 / tau)
    term1 = dc.sub(dc.logsumexp(logits, axis=1), dc.pick(logits, np.arange(b)))

    # column i (the anchor's own view) is replaced by the neighbour logit
    neg_mask = np.ones((b, n_cols), dtype=bool)
    neg_mask[np.arange(b), np.arange(b)] = False
    neighbours = support.embeddings[pos.reshape(-1)].reshape(b, k, -1)
    nn_logits = dc.scale(dc.sum(dc.mul(dc.reshape(anchors, (b, 1, -1)), neighbours), axis=2), 1.0 / tau)
    full = dc.concatenate([nn_logits, logits], axis=1)  # (b, k + n_cols)
    term2 = []
    for j in range(k):
        mask = np.zeros((b, k + n_cols), dtype=bool)
        mask[:, j] = True
        mask[:, k:] = neg_mask
        lse = dc.logsumexp(full, axis=1, mask=mask)
        term2.append(dc.reshape(dc.sub(lse, dc.take(full, (slice(None), j))), (b, 1)))
    term2 = dc.mean(dc.concatenate(term2, axis=1), axis=1)
    return dc.mean(dc.scale(dc.add(term1, term2), 0.5))


def _check_prob(p) -> None:
    v = dc.value_of(p)
    if np.any(v < -PROB_TOL) or np.any(np.abs(v.sum(axis=-1) - 1.0) > PROB_TOL):
        raise ValueError("inputs must be probability vectors")


def consistency_loss(pred_x, pred_xhat):
    """Mean squared difference between two prediction vectors (or batches of them)."""
    if dc.value_of(pred_x).shape != dc.value_of(pred_xhat).shape:
        raise ValueError("prediction shapes differ")
    _check_prob(pred_x)
    _check_prob(pred_xhat)
    diff = dc.sub(pred_x, pred_xhat)
    return dc.mean(dc.mul(diff, diff))


def pairwise_pseudo_labels(features, rho: float) -> np.ndarray:
    """1 where cosine similarity of two feature rows is at least ``rho``."""
    f = np.asarray(dc.value_of(features), dtype=np.float64)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    return (f @ f.T >= rho).astype(np.float64)


def pairwise_bce_loss(features, probs, rho: float = 0.9):
    """BCE between cosine pseudo-labels and inner products of head outputs.

    Pseudo-labels are constants computed from the feature values; gradients
    reach only ``probs``.
    """
    n = dc.value_of(probs).shape[0]
    if n < 2 or dc.value_of(features).shape[0] != n:
        raise ValueError("pairwise BCE needs at least two samples with matching features")
    _check_prob(probs)
    labels = pairwise_pseudo_labels(features, rho)
    iu, ju = np.triu_indices(n, k=1)
    sim = dc.clip(dc.matmul(probs, dc.transpose(probs)), BCE_CLAMP, 1.0 - BCE_CLAMP)
    s = dc.take(sim, (iu, ju))
    lab = labels[iu, ju]
    pos_term = dc.mul(dc.log(s), lab)
    neg_term = dc.mul(dc.log(dc.sub(1.0, s)), 1.0 - lab)
    return dc.scale(dc.mean(dc.add(pos_term, neg_term)), -1.0)


def fewshot_total_loss(sup_loss, self_loss, lam: float):
    """L = L_sup + lam * L_self."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return sup_loss
    return dc.add(sup_loss, dc.scale(self_loss, lam))
