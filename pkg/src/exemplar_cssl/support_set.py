"""FIFO support set of past embeddings and nearest-neighbour retrieval."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NO_LABEL = -1
UNIT_TOL = 1e-8


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True)
class SupportEntry:
    embedding: np.ndarray
    label: int | None
    index: int  # insertion counter


def _check_unit(z: np.ndarray, tol: float = UNIT_TOL) -> None:
    norms = np.linalg.norm(np.atleast_2d(z), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"embeddings must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def sq_distances(z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``z`` (m, d) and ``q`` (n, d)."""
    diff = z[:, None, :] - q[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


class SupportSet:
    """Bounded first-in-first-out queue of unit embeddings with optional labels.

    Entries are stored oldest first, so storage position order is insertion
    order and ``argmin`` ties resolve to the lowest insertion index.
    """

    def __init__(self, capacity: int = 1024, dim: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._emb = np.zeros((0, dim or 0))
        self._labels = np.zeros(0, dtype=np.int64)
        self._index = np.zeros(0, dtype=np.int64)
        self._counter = 0

    def __len__(self) -> int:
        return len(self._index)

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb

    @property
    def labels(self) -> np.ndarray:
        """Stored labels, ``NO_LABEL`` for unlabeled entries."""
        return self._labels

    @property
    def insertion_indices(self) -> np.ndarray:
        return self._index

    def entry(self, pos: int) -> SupportEntry:
        lab = int(self._labels[pos])
        return SupportEntry(self._emb[pos].copy(), None if lab == NO_LABEL else lab, int(self._index[pos]))

    def push(self, embeddings, labels=None) -> SupportSet:
        """Append entries in order, evicting the oldest beyond capacity."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if emb.size == 0:
            return self
        _check_unit(emb)
        n = len(emb)
        if labels is None:
            lab = np.full(n, NO_LABEL, dtype=np.int64)
        else:
            lab = np.array([NO_LABEL if v is None else int(v) for v in labels], dtype=np.int64)
            if len(lab) != n:
                raise ValueError("labels and embeddings differ in length")
        idx = np.arange(self._counter, self._counter + n, dtype=np.int64)
        self._counter += n
        if len(self) == 0:
            self._emb = emb.copy()
        else:
            if emb.shape[1] != self._emb.shape[1]:
                raise ValueError(f"embedding dim {emb.shape[1]} != support dim {self._emb.shape[1]}")
            self._emb = np.concatenate([self._emb, emb])
        self._labels = np.concatenate([self._labels, lab])
        self._index = np.concatenate([self._index, idx])
        if len(self) > self.capacity:
            keep = slice(len(self) - self.capacity, None)
            self._emb = self._emb[keep].copy()
            self._labels = self._labels[keep].copy()
            self._index = self._index[keep].copy()
        return self

    def nearest(self, z) -> SupportEntry:
        """Entry closest to ``z`` in Euclidean distance."""
        if len(self) == 0:
            raise EmptySupportError("support set is empty")
        z = np.asarray(z, dtype=np.float64)
        _check_unit(z)
        d = sq_distances(z[None, :], self._emb)[0]
        return self.entry(int(np.argmin(d)))

    def exemplar_positives(self, label: int | None = None) -> np.ndarray:
        """Storage positions admissible as exemplars for a query with ``label``.

        Unlabeled queries may match anything. Labeled queries may match
        entries with the same label or with no label. An empty result is
        returned as-is; the caller decides how to fall back.
        """
        if len(self) == 0:
            raise EmptySupportError("support set is empty")
        if label is None or label == NO_LABEL:
            return np.arange(len(self))
        return np.flatnonzero((self._labels == label) | (self._labels == NO_LABEL))

    def select_neighbors(self, z, labels=None, label_aware: bool = True, k: int = 1):
        """Nearest admissible entries for every row of ``z``.

        Returns ``(positions, fallback)`` where ``positions`` has shape
        (m, k) and ``fallback[i]`` is true when row i had a label but no
        admissible entry, in which case the unrestricted search was used.
        Slots beyond a row's admissible count hold -1.
        """
        if len(self) == 0:
            raise EmptySupportError("support set is empty")
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        _check_unit(z, 1e-6)
        k = min(k, len(self))
        d = sq_distances(z, self._emb)
        fallback = np.zeros(len(z), dtype=bool)
        if label_aware and labels is not None:
            lab = np.array([NO_LABEL if v is None else int(v) for v in labels], dtype=np.int64)
            allowed = (lab[:, None] == NO_LABEL) | (self._labels[None, :] == lab[:, None]) | (
                self._labels[None, :] == NO_LABEL
            )
            fallback = ~allowed.any(axis=1)
            if fallback.any():
                log.warning("%d labeled anchors had no admissible neighbour; using unrestricted search", fallback.sum())
                allowed[fallback] = True
            d = np.where(allowed, d, np.inf)
        # stable sort keeps lowest insertion index first among equal distances
        pos = np.argsort(d, axis=1, kind="stable")[:, :k]
        pos[np.isinf(np.take_along_axis(d, pos, axis=1))] = -1
        return pos, fallback
