"""Synthetic datasets with a planted uncertainty signal, plus naive oracles.

Samples are drawn from Gaussian clusters around orthogonal centroids. Each
sample gets an isotropic noise scale from ``{noise_low, noise_high}``; its task
loss is a declared increasing function of that scale plus a small jitter.
High-noise samples drift away from their centroid, so their nearest neighbor
tends to come from another cluster and their LA@1 drops. The head can see the
noise through the distance to the centroid, so the signal is learnable.

:func:`oracle_la` re-derives every LA@1 kind with explicit loops and shares no
code with :mod:`repunc.lametrics`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import EmbeddingSet, LabelSet, LossVector, MultiLabelSet, SegMaskSet
from .errors import ValidationError

LOSS_FUNCTIONS = {
    "identity": lambda s: s,
    "square": lambda s: s * s,
    "exp": lambda s: math.exp(s) - 1.0,
}
JITTER = 0.01


@dataclass(frozen=True)
class SynthSpec:
    n: int = 2000
    d: int = 16
    K: int = 8
    kind: str = "multilabel"
    height: int = 24
    width: int = 24
    clusters: int = 8
    separation: float = 1.5
    noise_low: float = 0.25
    noise_high: float = 1.0
    high_fraction: float = 0.3
    cooc_prob: float = 1.0
    loss_fn: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("multilabel", "segmask"):
            raise ValidationError(f"unknown synth kind {self.kind!r}")
        if not 0 <= self.noise_low <= self.noise_high:
            raise ValidationError("need 0 <= noise_low <= noise_high")
        if self.clusters > self.K:
            raise ValidationError(f"{self.clusters} clusters cannot map onto {self.K} classes")
        if self.clusters < 1 or self.n < 2 or self.d < 1 or self.K < 2:
            raise ValidationError("need clusters >= 1, n >= 2, d >= 1, K >= 2")
        if not 0 <= self.high_fraction <= 1:
            raise ValidationError("high_fraction must lie in [0, 1]")
        if self.loss_fn not in LOSS_FUNCTIONS:
            raise ValidationError(f"loss_fn must be one of {sorted(LOSS_FUNCTIONS)}")
        if self.kind == "segmask" and min(self.height, self.width) < 4:
            raise ValidationError("synthetic masks need sides of at least 4 pixels")


PRESETS = {
    "planted": SynthSpec(),
    "planted-seg": SynthSpec(kind="segmask"),
    "null": SynthSpec(noise_high=0.25),
}


@dataclass(eq=False)
class GroundTruth:
    noise_scale: np.ndarray
    uncertain: np.ndarray
    cluster: np.ndarray
    centroids: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "noise_scale": self.noise_scale.tolist(),
            "uncertain": self.uncertain.astype(int).tolist(),
            "cluster": self.cluster.tolist(),
            **self.meta,
        }


@dataclass(eq=False)
class SynthData:
    embeddings: EmbeddingSet
    labels: LabelSet
    losses: LossVector
    truth: GroundTruth


def _centroids(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    G = rng.standard_normal((spec.d, spec.d))
    Q, _ = np.linalg.qr(G)
    if spec.clusters <= spec.d:
        dirs = Q[: spec.clusters]
    else:
        dirs = rng.standard_normal((spec.clusters, spec.d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.separation * dirs


def _multilabels(spec: SynthSpec, cluster: np.ndarray, rng) -> np.ndarray:
    Y = np.zeros((spec.n, spec.K), dtype=np.uint8)
    Y[np.arange(spec.n), cluster] = 1
    cooc = (cluster + 1) % spec.K
    keep = rng.random(spec.n) < spec.cooc_prob
    Y[np.arange(spec.n)[keep], cooc[keep]] = 1
    return Y


def _masks(spec: SynthSpec, cluster: np.ndarray, rng) -> np.ndarray:
    # cluster template: left part class k, right part k+1, top band k+2;
    # the boundaries wobble per sample
    h, w = spec.height, spec.width
    out = np.empty((spec.n, h, w), dtype=np.int64)
    for i, k in enumerate(cluster):
        split = w // 2 + int(rng.integers(-2, 3))
        band = h // 4 + int(rng.integers(-1, 2))
        out[i, :, :split] = k
        out[i, :, split:] = (k + 1) % spec.K
        out[i, :band, :] = (k + 2) % spec.K
    return out


def generate(spec: SynthSpec, sample_seed: int | None = None, force_noise: float | None = None) -> SynthData:
    """Draw a planted-signal dataset.

    Centroids depend only on ``spec.seed``; ``sample_seed`` redraws the samples
    around the same centroids, and ``force_noise`` gives every sample the same
    noise scale (used for clean/noisy splits).
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    crng = np.random.default_rng(seeds[0])
    srng = np.random.default_rng(seeds[1] if sample_seed is None else np.random.SeedSequence([spec.seed, sample_seed]))
    centroids = _centroids(spec, crng)
    cluster = srng.integers(0, spec.clusters, size=spec.n)
    if force_noise is None:
        high = srng.random(spec.n) < spec.high_fraction
        sigma = np.where(high, spec.noise_high, spec.noise_low)
    else:
        sigma = np.full(spec.n, float(force_noise))
        srng.random(spec.n)
    X = centroids[cluster] + sigma[:, None] * srng.standard_normal((spec.n, spec.d))

    fn = LOSS_FUNCTIONS[spec.loss_fn]
    base = np.array([fn(s) for s in sigma])
    spread = fn(spec.noise_high) - fn(spec.noise_low)
    amp = JITTER * (spread if spread > 0 else max(abs(fn(spec.noise_low)), 1.0))
    losses = base + amp * srng.random(spec.n)

    if spec.kind == "multilabel":
        labels: LabelSet = MultiLabelSet(_multilabels(spec, cluster, srng))
    else:
        labels = SegMaskSet(_masks(spec, cluster, srng), spec.K)
    # noise_low == noise_high marks nothing as uncertain
    uncertain = sigma > spec.noise_low
    truth = GroundTruth(sigma, uncertain, cluster, centroids, {"spec": spec.__dict__.copy()})
    return SynthData(EmbeddingSet(X), labels, LossVector(losses), truth)


# ---------------------------------------------------------------------------
# naive oracles


def _nn_loops(X: np.ndarray, metric: str) -> list[int]:
    n = len(X)
    rows = [[float(v) for v in r] for r in X]
    norms = [math.sqrt(sum(v * v for v in r)) for r in rows]
    if metric == "cosine" and 0.0 in norms:
        raise ValidationError("zero-norm embedding under cosine metric")
    out = []
    for i in range(n):
        best, best_j = None, -1
        for j in range(n):
            if i == j:
                continue
            if metric == "cosine":
                s = sum(a * b for a, b in zip(rows[i], rows[j])) / (norms[i] * norms[j])
                if best is None or s > best:
                    best, best_j = s, j
            else:
                s = math.sqrt(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])))
                if best is None or s < best:
                    best, best_j = s, j
        out.append(best_j)
    return out


def _bounds(side: int, p: int) -> list[tuple[int, int]]:
    if side < p or p < 1:
        raise ValidationError(f"grid size p={p} does not fit a mask side of {side} pixels")
    step = side // p
    return [(i * step, side if i == p - 1 else (i + 1) * step) for i in range(p)]


def _hist(pixels, K: int) -> list[int]:
    h = [0] * K
    for v in pixels:
        h[v] += 1
    return h


def _hd(h1: list[int], h2: list[int]) -> float:
    n1, n2 = sum(h1), sum(h2)
    acc = sum((math.sqrt(a / n1) - math.sqrt(b / n2)) ** 2 for a, b in zip(h1, h2))
    return min(math.sqrt(acc / 2.0), 1.0)


def _cells(M, p: int) -> list[list[int]]:
    rows, cols = _bounds(len(M), p), _bounds(len(M[0]), p)
    return [
        [M[r][c] for r in range(r0, r1) for c in range(c0, c1)]
        for (r0, r1) in rows
        for (c0, c1) in cols
    ]


def _majority(pixels, K: int) -> int:
    h = _hist(pixels, K)
    best = 0
    for k in range(1, K):
        if h[k] > h[best]:
            best = k
    return best


def _oracle_pair(a, b, kind: str, p: int, K: int):
    if kind in ("one", "all", "pct"):
        size = sum(a)
        if size == 0:
            return float("nan")
        shared = sum(x * y for x, y in zip(a, b))
        if kind == "one":
            return 1.0 if shared > 0 else 0.0
        if kind == "all":
            return 1.0 if shared == size else 0.0
        return shared / size
    if kind == "seg_all":
        ca = {v for row in a for v in row}
        cb = {v for row in b for v in row}
        return 1.0 if ca <= cb else 0.0
    if kind == "pd":
        return 1.0 - _hd(_hist([v for r in a for v in r], K), _hist([v for r in b for v in r], K))
    cells_a, cells_b = _cells(a, p), _cells(b, p)
    if kind == "patches":
        same = all(_majority(x, K) == _majority(y, K) for x, y in zip(cells_a, cells_b))
        return 1.0 if same else 0.0
    if kind == "patches_pd":
        return 1.0 - sum(_hd(_hist(x, K), _hist(y, K)) for x, y in zip(cells_a, cells_b)) / len(cells_a)
    raise ValidationError(f"unknown LA kind {kind!r}")


def oracle_la(labels: LabelSet, E, metric: str = "cosine", kind: str = "pct", p: int = 3) -> np.ndarray:
    """Per-sample LA@1 via brute-force neighbors and literal formulas.

    Excluded samples (no classes) are NaN. Raises like the fast path when more
    than half the samples are excluded.
    """
    X = np.asarray(getattr(E, "data", E), dtype=np.float64)
    if isinstance(labels, MultiLabelSet):
        if kind not in ("one", "all", "pct"):
            raise ValidationError(f"kind {kind!r} does not apply to multilabel sets")
        items = labels.labels.astype(int).tolist()
        K = labels.num_classes
    else:
        if kind not in ("seg_all", "patches", "pd", "patches_pd"):
            raise ValidationError(f"kind {kind!r} does not apply to segmentation masks")
        items = labels.masks.astype(int).tolist()
        K = labels.num_classes
    if len(items) != len(X):
        raise ValidationError(f"{len(items)} labels but {len(X)} embeddings")
    nn = _nn_loops(X, metric)
    vals = np.array([_oracle_pair(items[i], items[nn[i]], kind, p, K) for i in range(len(items))])
    if np.isnan(vals).sum() * 2 > len(vals):
        raise ValidationError("more than half the samples have no classes")
    return vals


def planted_targets(data: SynthData, metric: str = "cosine", p: int = 3) -> dict[str, float | None]:
    """LA-CPA reached by the ideal uncertainty (the true noise scale), per LA kind.

    This is the reference a trained head should approach on the same instance.
    """
    from .cpa import la_cpa
    from .lametrics import dataset_la, kinds_for
    from .retrieval import nearest_neighbors

    nb = nearest_neighbors(data.embeddings, metric)
    return {
        kind: la_cpa(data.truth.noise_scale, dataset_la(data.labels, nb, kind, p))
        for kind in kinds_for(data.labels)
    }


def noise_split(spec: SynthSpec, sample_seed: int = 1) -> tuple[SynthData, SynthData]:
    """Fresh all-low-noise and all-high-noise draws around the training centroids."""
    clean = generate(spec, sample_seed=sample_seed, force_noise=spec.noise_low)
    noisy = generate(spec, sample_seed=sample_seed + 1, force_noise=spec.noise_high)
    return clean, noisy
