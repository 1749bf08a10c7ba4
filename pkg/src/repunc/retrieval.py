"""Exact nearest-neighbor search in representation space (self excluded)."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datamodel import EmbeddingSet
from .errors import ValidationError

METRICS = ("cosine", "euclidean")


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    nn: np.ndarray
    similarity: np.ndarray
    metric: str

    @property
    def count(self) -> int:
        return self.nn.shape[0]


def _as_matrix(E) -> np.ndarray:
    data = E.data if isinstance(E, EmbeddingSet) else np.asarray(E)
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError(f"need an (n>=2, d) embedding matrix, got shape {X.shape}")
    return X


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _normalize(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise ValidationError(f"zero-norm embedding at row {int(np.argmax(norms == 0))} under cosine metric")
    return X / norms[:, None]


def nearest_neighbors(E, metric: str = "cosine", block: int = 1024, threads: int = 1) -> NeighborIndex:
    """Nearest neighbor of every row, excluding the row itself.

    Cosine similarity is maximised, euclidean distance minimised; exact ties go
    to the smallest index. ``similarity`` holds the cosine similarity or, for
    the euclidean metric, the distance. Query rows are processed in blocks,
    optionally on a thread pool; blocks are independent so the result does not
    depend on ``threads``.
    """
    _check_metric(metric)
    X = _as_matrix(E)
    n = X.shape[0]
    if metric == "cosine":
        X = _normalize(X)
    else:
        # centering limits cancellation in the |a|^2 + |b|^2 - 2ab expansion
        X = X - X.mean(axis=0)
        sq = np.einsum("ij,ij->i", X, X)
    nn = np.empty(n, dtype=np.int64)
    sim = np.empty(n, dtype=np.float64)

    def run(start: int) -> None:
        stop = min(start + block, n)
        rows = np.arange(start, stop)
        G = X[start:stop] @ X.T
        if metric == "cosine":
            G[rows - start, rows] = -np.inf
            # argmax returns the first maximum, i.e. the smallest index on ties
            j = np.argmax(G, axis=1)
            nn[start:stop] = j
            sim[start:stop] = G[rows - start, j]
        else:
            D = np.maximum(sq[start:stop, None] + sq[None, :] - 2.0 * G, 0.0)
            D[rows - start, rows] = np.inf
            j = np.argmin(D, axis=1)
            nn[start:stop] = j
            sim[start:stop] = np.sqrt(D[rows - start, j])

    starts = range(0, n, block)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return NeighborIndex(nn, sim, metric)


def nearest_neighbors_bruteforce(E, metric: str = "cosine") -> NeighborIndex:
    """Pairwise-loop reference for :func:`nearest_neighbors` (tests only)."""
    _check_metric(metric)
    X = _as_matrix(E)
    n = X.shape[0]
    norms = [math.sqrt(float(np.dot(x, x))) for x in X]
    if metric == "cosine" and 0.0 in norms:
        raise ValidationError(f"zero-norm embedding at row {norms.index(0.0)} under cosine metric")
    nn = np.empty(n, dtype=np.int64)
    sim = np.empty(n, dtype=np.float64)
    for i in range(n):
        best_j, best = -1, None
        for j in range(n):
            if j == i:
                continue
            if metric == "cosine":
                score = float(np.dot(X[i], X[j])) / (norms[i] * norms[j])
                better = best is None or score > best
            else:
                diff = X[i] - X[j]
                score = math.sqrt(float(np.dot(diff, diff)))
                better = best is None or score < best
            if better:
                best_j, best = j, score
        nn[i], sim[i] = best_j, best
    return NeighborIndex(nn, sim, metric)
