"""Embedding and continual-learning metrics."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc
from .contrastive import cross_entropy

METRICS = ("linear_probe", "knn_accuracy", "separation_ratio")


def linear_probe(
    train_x,
    train_y,
    test_x,
    test_y,
    epochs: int = 200,
    lr: float = 1e-2,
    seed: int = 0,
) -> float:
    """Test accuracy of a softmax-regression probe on frozen embeddings.

    Full-batch Adam on cross-entropy; labels may be arbitrary ints.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    classes = np.unique(np.asarray(train_y))
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    lookup = {c: i for i, c in enumerate(classes.tolist())}
    targets = np.array([lookup[c] for c in np.asarray(train_y).tolist()])
    rng = np.random.default_rng(seed)
    d, k = train_x.shape[1], len(classes)
    params = {"W": rng.normal(0.0, 0.01, size=(d, k)), "b": np.zeros(k)}
    state = dc.OptimizerState("adam", lr)
    for _ in range(epochs):
        tr = dc.Trace()
        W, b = tr.param("W", params["W"]), tr.param("b", params["b"])
        loss = cross_entropy(dc.add(dc.matmul(train_x, W), b), targets)
        params, state = dc.optimizer_step(params, dc.gradient(tr, loss), state)
    pred = classes[np.argmax(test_x @ params["W"] + params["b"], axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))


def _cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return 1.0 - a @ b.T


def knn_predict(train_x, train_y, test_x, k: int) -> np.ndarray:
    train_x, test_x = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("empty train or test set")
    if not 1 <= k <= len(train_x):
        raise ValueError("k must lie in [1, train size]")
    dist = _cosine_distances(test_x, train_x)
    # stable sort: equal distances keep the lower train index
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    preds = []
    for row in nearest:
        votes: dict = {}
        for j in row:
            votes[train_y[j]] = votes.get(train_y[j], 0) + 1
        best = max(votes.values())
        preds.append(min(lab for lab, n in votes.items() if n == best))
    return np.array(preds)


def knn_accuracy(train_x, train_y, test_x, test_y, k: int = 5) -> float:
    """Fraction of test points whose k nearest train points (cosine) vote correctly."""
    return float(np.mean(knn_predict(train_x, train_y, test_x, k) == np.asarray(test_y)))


def cluster_accuracy(pred, truth) -> float:
    """Accuracy under the best one-to-one map from cluster ids to labels."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(pred) == 0 or len(pred) != len(truth):
        raise ValueError("need equal-length, non-empty inputs")
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    t_ids, t_idx = np.unique(truth, return_inverse=True)
    counts = np.zeros((len(p_ids), len(t_ids)), dtype=np.int64)
    np.add.at(counts, (p_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(counts[rows, cols].sum() / len(pred))


class AccuracyMatrix:
    """Accuracy per (evaluation time, group); NaN where the group is not yet introduced."""

    def __init__(self, groups: list):
        self.groups = list(groups)
        self.rows: list[np.ndarray] = []

    def add_row(self, values: dict) -> None:
        row = np.full(len(self.groups), np.nan)
        for g, v in values.items():
            row[self.groups.index(g)] = v
        self.rows.append(row)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.rows)


def forgetting(matrix) -> np.ndarray:
    """Per-group best earlier accuracy minus final accuracy, clipped at 0."""
    m = matrix.values if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2:
        raise ValueError("forgetting needs at least two evaluation times")
    if np.isnan(m[-1]).any():
        raise ValueError("final row has undefined entries")
    out = np.zeros(m.shape[1])
    for g in range(m.shape[1]):
        past = m[:-1, g][~np.isnan(m[:-1, g])]
        if len(past) == 0:
            raise ValueError(f"group {g} has no evaluation before the final time")
        out[g] = max(0.0, past.max() - m[-1, g])
    return out


def separation_ratio(embeddings, labels) -> float:
    """Mean inter-centroid distance over mean sample-to-own-centroid distance.

    Returns ``inf`` when every class collapses to a point.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    centroids, within = [], []
    for c in classes:
        members = x[y == c]
        if len(members) < 2:
            raise ValueError(f"class {c} has fewer than two samples")
        mu = members.mean(axis=0)
        centroids.append(mu)
        within.extend(np.linalg.norm(members - mu, axis=1))
    centroids = np.array(centroids)
    iu, ju = np.triu_indices(len(classes), k=1)
    between = np.linalg.norm(centroids[iu] - centroids[ju], axis=1).mean()
    w = float(np.mean(within))
    return float("inf") if w == 0.0 else float(between / w)
