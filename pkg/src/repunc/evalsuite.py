"""Evaluation workflows built on a trained head.

Covers scoring, LA-CPA tables, discard tests with their monotonicity fraction,
per-token uncertainty maps and the clean-vs-noisy shift summary, and binds
them into a single reproducible :func:`evaluate` run driven by a JSON run spec.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datamodel as dm
from .cpa import auroc, la_cpa
from .datamodel import EmbeddingSet, LossVector, TokenGrid, UncertaintyVector
from .errors import ValidationError, stage
from .lametrics import DEFAULT_P, LAVector, dataset_la, kinds_for
from .retrieval import nearest_neighbors
from .unchead import HeadParams, forward, load_head

DEFAULT_FRACTIONS = 200


def score_uncertainties(params: HeadParams, E: EmbeddingSet, leaky_slope: float = 0.01, source: str = "") -> UncertaintyVector:
    if E.dim != params.input_dim:
        raise ValidationError(f"embedding dim {E.dim} does not match head input {params.input_dim}")
    return UncertaintyVector(forward(params, E.data, leaky_slope), source)


# ---------------------------------------------------------------------------
# discard test


@dataclass(frozen=True, eq=False)
class DiscardCurve:
    fractions: np.ndarray
    mean_loss: np.ndarray
    discarded: np.ndarray
    mf: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "mean_loss"])
        for f, v in zip(self.fractions, self.mean_loss):
            w.writerow([repr(float(f)), repr(float(v))])
        return buf.getvalue()


def monotonicity_fraction(curve) -> float:
    """Share of adjacent steps where the curve does not increase."""
    e = np.asarray(curve, dtype=np.float64)
    if e.size < 2:
        raise ValidationError("monotonicity fraction needs at least 2 curve points")
    return float(np.mean(e[:-1] >= e[1:]))


def discard_order(u) -> np.ndarray:
    """Indices by uncertainty, highest first; ties keep ascending index order."""
    u = np.asarray(u, dtype=np.float64)
    return np.lexsort((np.arange(u.size), -u))


def discard_test(u, l, n_fractions: int = DEFAULT_FRACTIONS) -> DiscardCurve:
    """Mean remaining loss after dropping the most uncertain samples.

    Point ``i`` drops ``ceil(i * n / n_fractions)`` samples, for
    ``i = 0 .. n_fractions - 1``; the fully discarded set is never reached.
    """
    uv = np.asarray(getattr(u, "values", u), dtype=np.float64)
    lv = np.asarray(getattr(l, "values", l), dtype=np.float64)
    if uv.shape != lv.shape:
        raise ValidationError(f"{uv.size} uncertainties but {lv.size} losses")
    n = uv.size
    if n_fractions < 2:
        raise ValidationError("need at least 2 discard fractions")
    if n < n_fractions:
        raise ValidationError(f"{n} samples cannot fill {n_fractions} discard fractions")
    ranked = lv[discard_order(uv)]
    i = np.arange(n_fractions)
    # exact integer ceil(i * n / n_fractions)
    drop = -((-i * n) // n_fractions)
    mean_loss = np.array([ranked[k:].mean() for k in drop])
    return DiscardCurve(i / n_fractions, mean_loss, drop, monotonicity_fraction(mean_loss))


def max_pixel_loss_aggregate(pixel_losses) -> LossVector:
    """Per-sample image loss as the largest pixel loss."""
    return LossVector(_pixel_stack(pixel_losses).max(axis=(1, 2)))


def mean_pixel_loss_aggregate(pixel_losses) -> LossVector:
    return LossVector(_pixel_stack(pixel_losses).mean(axis=(1, 2)))


def _pixel_stack(pixel_losses) -> np.ndarray:
    maps = np.asarray(pixel_losses, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3 or maps.shape[1] == 0 or maps.shape[2] == 0:
        raise ValidationError(f"expected a stack of non-empty 2-d loss maps, got shape {maps.shape}")
    if not np.isfinite(maps).all():
        raise ValidationError("non-finite pixel loss")
    return maps


# ---------------------------------------------------------------------------
# localized uncertainty


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    values: np.ndarray
    patch_px: int

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def localized_uncertainty(params: HeadParams, tg: TokenGrid, leaky_slope: float = 0.01) -> UncertaintyMap:
    """Score every spatial token on its own and keep the grid layout."""
    if tg.dim != params.input_dim:
        raise ValidationError(f"token dim {tg.dim} does not match head input {params.input_dim}")
    u = forward(params, tg.tokens, leaky_slope)
    return UncertaintyMap(u.reshape(tg.rows, tg.cols), tg.patch_px)


def maps_to_csv(maps: list[UncertaintyMap], ids=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "row", "col", "uncertainty"])
    for s, m in enumerate(maps):
        sid = ids[s] if ids is not None else s
        for r in range(m.rows):
            for c in range(m.cols):
                w.writerow([sid, r, c, repr(float(m.values[r, c]))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# clean vs noisy


@dataclass(frozen=True)
class ShiftSummary:
    n_clean: int
    n_noisy: int
    mean_clean: float
    mean_noisy: float
    mean_diff: float
    median_diff: float
    prob_noisy_higher: float
    shifted: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def noise_shift(u_clean, u_noisy) -> ShiftSummary:
    """Compare two uncertainty samples; P(noisy > clean) counts ties as one half."""
    a = np.asarray(getattr(u_clean, "values", u_clean), dtype=np.float64)
    b = np.asarray(getattr(u_noisy, "values", u_noisy), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("noise shift needs non-empty clean and noisy samples")
    prob = auroc(np.r_[a, b], np.r_[np.zeros(a.size), np.ones(b.size)])
    return ShiftSummary(
        n_clean=int(a.size),
        n_noisy=int(b.size),
        mean_clean=float(a.mean()),
        mean_noisy=float(b.mean()),
        mean_diff=float(b.mean() - a.mean()),
        median_diff=float(np.median(b) - np.median(a)),
        prob_noisy_higher=prob,
        shifted=prob > 0.5,
    )


def histograms_csv(u_clean, u_noisy, bins: int = 50) -> str:
    """Shared-bin histograms of both samples, for external density plots."""
    a = np.asarray(getattr(u_clean, "values", u_clean), dtype=np.float64)
    b = np.asarray(getattr(u_noisy, "values", u_noisy), dtype=np.float64)
    edges = np.histogram_bin_edges(np.r_[a, b], bins=bins)
    ha, _ = np.histogram(a, edges)
    hb, _ = np.histogram(b, edges)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "clean", "noisy"])
    for lo, hi, x, y in zip(edges[:-1], edges[1:], ha, hb):
        w.writerow([repr(float(lo)), repr(float(hi)), int(x), int(y)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# full evaluation run


@dataclass
class RunSpec:
    """Inputs and settings of one evaluation; relative paths resolve against ``base``."""

    embeddings: str
    labels: str
    label_kind: str = "multilabel"
    losses: str | None = None
    head: str | None = None
    uncertainties: str | None = None
    kinds: list[str] | None = None
    p: int = DEFAULT_P
    metric: str = "cosine"
    n_fractions: int = DEFAULT_FRACTIONS
    seed: int = 0
    clean_embeddings: str | None = None
    noisy_embeddings: str | None = None
    base: str = "."

    @classmethod
    def from_dict(cls, d: dict, base: str = ".") -> "RunSpec":
        known = set(cls.__dataclass_fields__) - {"base"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown run spec fields: {sorted(unknown)}")
        for req in ("embeddings", "labels"):
            if req not in d:
                raise ValidationError(f"run spec is missing required field {req!r}")
        return cls(**d, base=base)

    @classmethod
    def load(cls, path) -> "RunSpec":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"run spec {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValidationError(f"run spec {path} must be a JSON object")
        return cls.from_dict(d, base=str(Path(path).parent))

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base) / p

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("base")
        return d


@dataclass
class MetricResult:
    mean: float
    la_cpa: float | None
    excluded: int


@dataclass
class EvalReport:
    n: int
    metric: str
    p: int
    seed: int
    uncertainty_source: str
    metrics: dict[str, MetricResult] = field(default_factory=dict)
    discard: DiscardCurve | None = None
    shift: ShiftSummary | None = None

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "metric": self.metric,
            "p": self.p,
            "seed": self.seed,
            "uncertainty_source": self.uncertainty_source,
            "metrics": {
                k: {
                    "mean": r.mean,
                    "la_cpa": "undefined" if r.la_cpa is None else r.la_cpa,
                    "excluded": r.excluded,
                }
                for k, r in self.metrics.items()
            },
        }
        if self.discard is not None:
            out["discard"] = {
                "n_fractions": int(self.discard.fractions.size),
                "mf": self.discard.mf,
                "fractions": self.discard.fractions.tolist(),
                "mean_loss": self.discard.mean_loss.tolist(),
            }
        if self.shift is not None:
            out["shift"] = self.shift.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "la_mean", "la_cpa", "excluded", "n"])
        for k, r in self.metrics.items():
            w.writerow([k, repr(r.mean), "undefined" if r.la_cpa is None else repr(r.la_cpa), r.excluded, self.n])
        return buf.getvalue()


def la_table(labels, neighbors, u, kinds, p: int = DEFAULT_P) -> dict[str, MetricResult]:
    out = {}
    for kind in kinds:
        la: LAVector = dataset_la(labels, neighbors, kind, p)
        out[kind] = MetricResult(la.mean, la_cpa(u, la), la.excluded)
    return out


def evaluate(spec: RunSpec, threads: int = 1) -> EvalReport:
    """Run retrieval, LA@1, LA-CPA, discard test and optional shift summary.

    Errors carry the name of the stage that failed.
    """
    with stage("load-embeddings"):
        E = dm.load_embeddings(spec.resolve(spec.embeddings))
    with stage("load-labels"):
        labels = dm.load_labels(spec.resolve(spec.labels), spec.label_kind, expected_count=E.count)
    losses = None
    if spec.losses:
        with stage("load-losses"):
            losses = dm.load_losses(spec.resolve(spec.losses), expected_count=E.count)

    params = None
    slope = 0.01
    with stage("score"):
        if spec.head:
            params, cfg = load_head(spec.resolve(spec.head))
            slope = cfg.leaky_slope
            u = score_uncertainties(params, E, slope, source=Path(spec.head).name)
        elif spec.uncertainties:
            u = dm.load_uncertainties(spec.resolve(spec.uncertainties))
            if u.count != E.count:
                raise ValidationError(f"{u.count} uncertainties but {E.count} embeddings")
        else:
            raise ValidationError("run spec needs either 'head' or 'uncertainties'")

    with stage("retrieval"):
        nb = nearest_neighbors(E, spec.metric, threads=threads)
    with stage("lametrics"):
        kinds = spec.kinds or list(kinds_for(labels))
        metrics = la_table(labels, nb, u, kinds, spec.p)

    report = EvalReport(E.count, spec.metric, spec.p, spec.seed, u.source, metrics)
    if losses is not None:
        with stage("discard"):
            report.discard = discard_test(u, losses, spec.n_fractions)
    if spec.clean_embeddings or spec.noisy_embeddings:
        with stage("noise-shift"):
            if params is None or not (spec.clean_embeddings and spec.noisy_embeddings):
                raise ValidationError("noise shift needs a head plus both clean_embeddings and noisy_embeddings")
            uc = score_uncertainties(params, dm.load_embeddings(spec.resolve(spec.clean_embeddings)), slope)
            un = score_uncertainties(params, dm.load_embeddings(spec.resolve(spec.noisy_embeddings)), slope)
            report.shift = noise_shift(uc, un)
    return report


__all__ = [
    "score_uncertainties",
    "discard_test",
    "monotonicity_fraction",
    "max_pixel_loss_aggregate",
    "mean_pixel_loss_aggregate",
    "localized_uncertainty",
    "noise_shift",
    "evaluate",
    "RunSpec",
    "EvalReport",
    "DiscardCurve",
    "UncertaintyMap",
    "ShiftSummary",
]
