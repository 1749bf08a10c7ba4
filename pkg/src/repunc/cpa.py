"""AUROC and the coefficient of predictive ability (CPA).

CPA generalizes AUROC to any linearly ordered outcome. With distinct outcome
values ``z_1 < ... < z_m`` every threshold ``z_{c+1}`` defines a binary problem
``y >= z_{c+1}``; CPA is the average of their AUROCs weighted by
``n_c^- * n_c^+``, the number of outcome pairs the threshold separates. Since
``n^- n^+ AUROC`` is the Mann-Whitney U statistic, CPA is a ratio of sums of U
statistics and needs a single sort of the predictor.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _pairs(predictor, outcome) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(predictor, dtype=np.float64).ravel()
    y = np.asarray(outcome, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValidationError(f"predictor and outcome lengths differ: {x.size} vs {y.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValidationError("predictor and outcome must be finite")
    return x, y


def auroc(predictor, binary_outcome) -> float:
    """Probability that a positive outscores a negative, ties counting one half."""
    x, y = _pairs(predictor, binary_outcome)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("binary outcome must contain only 0 and 1")
    pos = y == 1.0
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both outcome classes present")
    u = midranks(x)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def cpa(predictor, outcome) -> float:
    x, y = _pairs(predictor, outcome)
    levels, inverse = np.unique(y, return_inverse=True)
    if levels.size < 2:
        raise ValidationError("CPA needs at least two distinct outcome values")
    r = midranks(x)
    n = y.size
    # per outcome level: sample count and predictor rank sum
    count = np.bincount(inverse, minlength=levels.size).astype(np.float64)
    rsum = np.bincount(inverse, weights=r, minlength=levels.size)
    # positives of threshold z_{c+1} are levels c+1..m-1 (0-based)
    n_pos = np.cumsum(count[::-1])[::-1][1:]
    r_pos = np.cumsum(rsum[::-1])[::-1][1:]
    n_neg = n - n_pos
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return float(u.sum() / (n_pos * n_neg).sum())


def cpa_bruteforce(predictor, outcome) -> float:
    """CPA built literally: one binary problem per threshold, pair counting each.

    Reference implementation for tests, O(m n^2).
    """
    x, y = _pairs(predictor, outcome)
    levels = sorted(set(y.tolist()))
    if len(levels) < 2:
        raise ValidationError("CPA needs at least two distinct outcome values")
    num = 0.0
    den = 0.0
    for z in levels[1:]:
        pos = [xi for xi, yi in zip(x, y) if yi >= z]
        neg = [xi for xi, yi in zip(x, y) if yi < z]
        score = 0.0
        for a in pos:
            for b in neg:
                score += 1.0 if a > b else 0.5 if a == b else 0.0
        weight = len(pos) * len(neg)
        auc = score / weight
        num += weight * auc
        den += weight
    return num / den


def uroc_curve(predictor, outcome, grid: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """UROC curve as (fpr, tpr) points on a uniform false-positive-rate grid.

    Each threshold's ROC curve is linearly interpolated onto the grid and the
    curves are averaged with the CPA weights. Emitted as data for external
    plotting.
    """
    x, y = _pairs(predictor, outcome)
    levels = np.unique(y)
    if levels.size < 2:
        raise ValidationError("UROC needs at least two distinct outcome values")
    fpr_grid = np.linspace(0.0, 1.0, grid)
    scores = np.unique(x)[::-1]
    acc = np.zeros(grid)
    total = 0.0
    for z in levels[1:]:
        pos = y >= z
        n_pos, n_neg = pos.sum(), (~pos).sum()
        tpr = np.r_[0.0, [(x[pos] >= s).sum() / n_pos for s in scores]]
        fpr = np.r_[0.0, [(x[~pos] >= s).sum() / n_neg for s in scores]]
        w = float(n_pos * n_neg)
        # np.interp needs increasing xp; vertical ROC steps keep the upper value
        acc += w * np.interp(fpr_grid, fpr, tpr, left=0.0, right=1.0)
        total += w
    return fpr_grid, acc / total


def la_cpa(uncertainty, la) -> float | None:
    """CPA of uncertainty against label disagreement ``1 - LA@1``.

    Accepts raw arrays or containers exposing ``.values``; NaN entries of ``la``
    (excluded samples) are dropped. Returns ``None`` when ``la`` is constant,
    where the score is undefined.
    """
    u = np.asarray(getattr(uncertainty, "values", uncertainty), dtype=np.float64)
    v = np.asarray(getattr(la, "values", la), dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"uncertainty and LA lengths differ: {u.size} vs {v.size}")
    keep = ~np.isnan(v)
    u, v = u[keep], v[keep]
    if np.unique(v).size < 2:
        return None
    return cpa(u, 1.0 - v)
