"""Label Agreement@1 metrics between a sample's labels and its nearest neighbor's.

Multilabel kinds compare binary class vectors ``c`` (sample) and ``c*``
(neighbor): ``one``, ``all`` and ``pct``. Segmentation kinds compare masks:
``seg_all`` (class sets), ``patches`` (majority class per cell of a p x p
grid), ``pd`` (one minus Hellinger distance of class fractions) and
``patches_pd`` (cell-averaged Hellinger distance).

Cells of the p x p grid have floor(side / p) pixels per side; the last row and
column of cells absorb the remainder. Majority ties go to the smallest class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import LabelSet, MultiLabelSet
from .errors import ValidationError
from .retrieval import NeighborIndex

MULTILABEL_KINDS = ("one", "all", "pct")
SEGMASK_KINDS = ("seg_all", "patches", "pd", "patches_pd")
BINARY_KINDS = frozenset({"one", "all", "seg_all", "patches"})
DEFAULT_P = 3
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LAVector:
    """Per-sample LA@1 values; excluded samples are NaN."""

    values: np.ndarray
    kind: str
    p: int | None = None

    @property
    def included(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def excluded(self) -> int:
        return int(np.isnan(self.values).sum())

    @property
    def mean(self) -> float:
        return _pairwise_sum(self.values[self.included]) / int(self.included.sum())


def _vec(c) -> np.ndarray:
    return np.asarray(c, dtype=np.int64)


def _check_pair(c: np.ndarray, c_star: np.ndarray) -> None:
    if c.shape != c_star.shape:
        raise ValidationError(f"class vectors differ in length: {c.shape} vs {c_star.shape}")
    if c.sum() == 0:
        raise ValidationError("empty class vector: LA@1 is undefined for a sample with no classes")


def one_la(c, c_star) -> int:
    c, c_star = _vec(c), _vec(c_star)
    _check_pair(c, c_star)
    return int(c @ c_star > 0)


def all_la(c, c_star) -> int:
    c, c_star = _vec(c), _vec(c_star)
    _check_pair(c, c_star)
    return int(c @ c_star == c.sum())


def pct_la(c, c_star) -> float:
    """Share of the sample's classes that also occur in the neighbor."""
    c, c_star = _vec(c), _vec(c_star)
    _check_pair(c, c_star)
    return float(c @ c_star) / float(c.sum())


def hellinger(prob_a, prob_b) -> float:
    a = np.asarray(prob_a, dtype=np.float64)
    b = np.asarray(prob_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"distributions differ in length: {a.shape} vs {b.shape}")
    for name, v in (("first", a), ("second", b)):
        if (v < 0).any():
            raise ValidationError(f"negative entry in {name} distribution")
        if abs(v.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f"{name} distribution sums to {v.sum():.12g}, not 1")
    return float(_hellinger(a, b))


def _hellinger(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # reduces over the last axis; clipping only absorbs rounding above 1
    d = np.sqrt(a) - np.sqrt(b)
    return np.minimum(np.sqrt(0.5 * np.sum(d * d, axis=-1)), 1.0)


def cell_edges(side: int, p: int) -> np.ndarray:
    if p < 1 or side < p:
        raise ValidationError(f"grid size p={p} does not fit a mask side of {side} pixels")
    step = side // p
    return np.array([i * step for i in range(p)] + [side])


def _check_masks(M: np.ndarray, M_star: np.ndarray) -> None:
    if M.shape != M_star.shape or M.ndim != 2:
        raise ValidationError(f"mask shapes differ: {M.shape} vs {M_star.shape}")


def _num_classes(*masks) -> int:
    return int(max(int(m.max()) for m in masks)) + 1


def class_fractions(M, K: int) -> np.ndarray:
    M = np.asarray(M, dtype=np.int64)
    return np.bincount(M.ravel(), minlength=K) / M.size


def cell_counts(M, p: int, K: int) -> np.ndarray:
    """Class histogram of every grid cell, shape (p, p, K)."""
    M = np.asarray(M, dtype=np.int64)
    rows, cols = cell_edges(M.shape[0], p), cell_edges(M.shape[1], p)
    out = np.zeros((p, p, K), dtype=np.int64)
    for i in range(p):
        for j in range(p):
            block = M[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            out[i, j] = np.bincount(block.ravel(), minlength=K)
    return out


def majority_matrix(M, p: int, K: int | None = None) -> np.ndarray:
    K = _num_classes(M) if K is None else K
    # argmax takes the first maximum: smallest class index on ties
    return np.argmax(cell_counts(M, p, K), axis=-1)


def seg_all_la(M, M_star) -> int:
    M, M_star = np.asarray(M), np.asarray(M_star)
    _check_masks(M, M_star)
    K = _num_classes(M, M_star)
    c = np.bincount(M.ravel().astype(np.int64), minlength=K) > 0
    c_star = np.bincount(M_star.ravel().astype(np.int64), minlength=K) > 0
    return int(not np.any(c & ~c_star))


def patches_la(M, M_star, p: int = DEFAULT_P) -> int:
    M, M_star = np.asarray(M), np.asarray(M_star)
    _check_masks(M, M_star)
    K = _num_classes(M, M_star)
    return int(np.array_equal(majority_matrix(M, p, K), majority_matrix(M_star, p, K)))


def pd_la(M, M_star) -> float:
    M, M_star = np.asarray(M), np.asarray(M_star)
    _check_masks(M, M_star)
    K = _num_classes(M, M_star)
    return float(1.0 - _hellinger(class_fractions(M, K), class_fractions(M_star, K)))


def patches_pd_la(M, M_star, p: int = DEFAULT_P) -> float:
    M, M_star = np.asarray(M), np.asarray(M_star)
    _check_masks(M, M_star)
    K = _num_classes(M, M_star)
    a, b = cell_counts(M, p, K), cell_counts(M_star, p, K)
    fa = a / a.sum(axis=-1, keepdims=True)
    fb = b / b.sum(axis=-1, keepdims=True)
    return float(1.0 - _hellinger(fa, fb).mean())


def kinds_for(labels: LabelSet) -> tuple[str, ...]:
    return MULTILABEL_KINDS if isinstance(labels, MultiLabelSet) else SEGMASK_KINDS


def _pairwise_sum(x: np.ndarray) -> float:
    # fixed-order pairwise reduction, independent of how values were produced
    x = list(map(float, x))
    while len(x) > 1:
        nxt = [x[i] + x[i + 1] for i in range(0, len(x) - 1, 2)]
        if len(x) % 2:
            nxt.append(x[-1])
        x = nxt
    return x[0]


def dataset_la(labels: LabelSet, neighbors: NeighborIndex, kind: str, p: int = DEFAULT_P) -> LAVector:
    """LA@1 of every sample against its nearest neighbor.

    Multilabel samples without any class are excluded (NaN) and counted; more
    than half excluded is an error since the dataset mean would be meaningless.
    """
    nn = np.asarray(neighbors.nn)
    if nn.shape[0] != labels.count:
        raise ValidationError(f"{labels.count} labels but {nn.shape[0]} neighbors")
    if kind not in kinds_for(labels):
        raise ValidationError(f"kind {kind!r} does not apply to {type(labels).__name__}; use {kinds_for(labels)}")

    if isinstance(labels, MultiLabelSet):
        C = labels.labels.astype(np.int64)
        size = C.sum(axis=1)
        shared = np.einsum("ij,ij->i", C, C[nn])
        with np.errstate(invalid="ignore", divide="ignore"):
            if kind == "one":
                vals = (shared > 0).astype(np.float64)
            elif kind == "all":
                vals = (shared == size).astype(np.float64)
            else:
                vals = shared / size.astype(np.float64)
        vals = np.where(size == 0, np.nan, vals)
        excluded = int((size == 0).sum())
        if excluded * 2 > labels.count:
            raise ValidationError(f"{excluded} of {labels.count} samples have no classes; LA@1 mean is meaningless")
        return LAVector(vals, kind, None)

    masks = labels.masks.astype(np.int64)
    n, K = labels.count, labels.num_classes
    if kind == "seg_all":
        present = np.stack([np.bincount(m.ravel(), minlength=K) > 0 for m in masks])
        vals = (~np.any(present & ~present[nn], axis=1)).astype(np.float64)
    elif kind == "pd":
        frac = np.stack([class_fractions(m, K) for m in masks])
        vals = 1.0 - _hellinger(frac, frac[nn])
    else:
        counts = np.stack([cell_counts(m, p, K) for m in masks])
        if kind == "patches":
            maj = np.argmax(counts, axis=-1).reshape(n, -1)
            vals = np.all(maj == maj[nn], axis=1).astype(np.float64)
        else:
            frac = counts / counts.sum(axis=-1, keepdims=True)
            vals = 1.0 - _hellinger(frac, frac[nn]).reshape(n, -1).mean(axis=1)
    return LAVector(vals, kind, p if kind in ("patches", "patches_pd") else None)


def is_binary_kind(kind: str) -> bool:
    return kind in BINARY_KINDS


__all__ = [
    "LAVector",
    "one_la",
    "all_la",
    "pct_la",
    "seg_all_la",
    "patches_la",
    "hellinger",
    "pd_la",
    "patches_pd_la",
    "dataset_la",
    "majority_matrix",
]
