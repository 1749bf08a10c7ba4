"""Oracle-equivalence suites runnable outside pytest (``repunc selftest``)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cpa import auroc, cpa, cpa_bruteforce
from .datamodel import MultiLabelSet, SegMaskSet
from .lametrics import MULTILABEL_KINDS, SEGMASK_KINDS, dataset_la
from .retrieval import nearest_neighbors, nearest_neighbors_bruteforce
from .synth import oracle_la
from .unchead import TENSORS, HeadConfig, HeadParams, forward, init_head, ranking_loss, ranking_loss_grad

log = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""


def finite_difference_grad(params: HeadParams, e1, e2, l1, l2, m: float, step: float = 1e-5, slope: float = 0.01):
    """Central finite differences of the pair hinge w.r.t. every parameter entry."""
    def loss_at(p: HeadParams) -> float:
        u1, u2 = forward(p, e1, slope), forward(p, e2, slope)
        return ranking_loss(u1, u2, l1, l2, m)[0]

    out = {}
    for name in TENSORS:
        base = getattr(params, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            hi = loss_at(params)
            base[idx] = orig - step
            lo = loss_at(params)
            base[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        out[name] = g
    return HeadParams(**out)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den) if num > 0 else 0.0


def random_grad_case(rng: np.random.Generator, active: bool | None = None):
    """A small random head plus a sample pair; ``active`` forces the hinge state."""
    while True:
        d = int(rng.integers(2, 6))
        cfg = HeadConfig(input_dim=d, unc_width=int(rng.integers(3, 9)), seed=int(rng.integers(1 << 30)))
        params = init_head(cfg).map(lambda t: t + 0.3 * rng.standard_normal(t.shape))
        e1, e2 = rng.standard_normal(d), rng.standard_normal(d)
        l1, l2 = float(rng.random()), float(rng.random())
        gap = (1.0 if l1 > l2 else -1.0) * (forward(params, e1) - forward(params, e2))
        if active is None:
            return params, e1, e2, l1, l2, 0.1
        if active:
            return params, e1, e2, l1, l2, max(gap, 0.0) + 0.05 + float(rng.random())
        # keep the hinge clearly flat: margin at least 0.02 below the gap
        if gap > 0.05:
            return params, e1, e2, l1, l2, gap * float(rng.uniform(0.1, 0.6))


def check_gradients(cases: int = 100, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        params, e1, e2, l1, l2, m = random_grad_case(rng, active=bool(i % 2))
        g = ranking_loss_grad(params, e1, e2, l1, l2, m)
        fd = finite_difference_grad(params, e1, e2, l1, l2, m)
        for name in TENSORS:
            worst = max(worst, relative_error(getattr(g, name), getattr(fd, name)))
    return SuiteResult("gradient-check", worst <= tol, cases, f"max relative error {worst:.3g}")


def check_retrieval(cases: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        X = rng.standard_normal((int(rng.integers(2, 64)), int(rng.integers(1, 16))))
        for metric in ("cosine", "euclidean"):
            if not np.array_equal(nearest_neighbors(X, metric).nn, nearest_neighbors_bruteforce(X, metric).nn):
                bad += 1
    return SuiteResult("retrieval-oracle", bad == 0, 2 * cases, f"{bad} mismatches")


def check_cpa(cases: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, n).astype(float)
        y = rng.integers(0, 4, n).astype(float)
        if np.unique(y).size < 2:
            continue
        worst = max(worst, abs(cpa(x, y) - cpa_bruteforce(x, y)))
        yb = (y > np.median(y)).astype(float)
        if np.unique(yb).size == 2:
            worst = max(worst, abs(cpa(x, yb) - auroc(x, yb)))
    return SuiteResult("cpa-oracle", worst <= 1e-12, cases, f"max abs deviation {worst:.3g}")


def check_lametrics(cases: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(3, 24))
        X = rng.standard_normal((n, 4))
        ml = MultiLabelSet((rng.random((n, 5)) < 0.4).astype(np.uint8) | np.eye(5, dtype=np.uint8)[rng.integers(0, 5, n)])
        sm = SegMaskSet(rng.integers(0, 4, (n, 7, 8)), 4)
        nb = nearest_neighbors(X)
        for labels, kinds in ((ml, MULTILABEL_KINDS), (sm, SEGMASK_KINDS)):
            for kind in kinds:
                fast = dataset_la(labels, nb, kind, 3).values
                slow = oracle_la(labels, X, "cosine", kind, 3)
                if not np.allclose(fast, slow, rtol=0, atol=1e-12, equal_nan=True):
                    bad += 1
    return SuiteResult("lametrics-oracle", bad == 0, cases * 7, f"{bad} mismatches")


def run_all(seed: int = 0, quick: bool = True) -> list[SuiteResult]:
    scale = 1 if quick else 5
    suites = [
        check_retrieval(20 * scale, seed),
        check_cpa(100 * scale, seed),
        check_lametrics(10 * scale, seed),
        check_gradients(20 * scale, seed),
    ]
    for s in suites:
        log.info("%s: %s (%d cases, %s)", s.name, "ok" if s.passed else "FAILED", s.cases, s.detail)
    return suites
