"""Loss-prediction uncertainty head trained on frozen embeddings.

The head is a two-hidden-layer MLP ``e -> softplus(W3' lrelu(W2' lrelu(W1' e + b1) + b2) + b3)``.
It is fitted with a pairwise margin ranking objective: each sample of a batch
is paired with a random distinct partner of the same batch and the hinge
``max(0, m - s * (u1 - u2))`` is minimised, where ``s = +1`` if the first
sample has the strictly larger task loss and ``-1`` otherwise. Only loss
comparisons enter the objective, so any strictly increasing rescaling of the
losses yields the same training run.

Everything is numpy float64 with hand-written backpropagation.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import ALIGN, EmbeddingSet, LossVector, read_binary, write_binary
from .errors import TrainingError, ValidationError

TENSORS = ("W1", "b1", "W2", "b2", "W3", "b3")
ADAM_EPS = 1e-8
OBJECTIVES = ("ranking", "l2")
TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int | None = None
    unc_width: int = 512
    margin: float = 0.1
    epochs: int = 1000
    warmup_epochs: int = 50
    base_lr: float = 1e-4
    final_lr: float = 1e-8
    weight_decay: float = 0.01
    beta1: float = 0.8
    beta2: float = 0.95
    batch_size: int = 256
    seed: int = 0
    leaky_slope: float = 0.01
    skip_tied_pairs: bool = False
    objective: str = "ranking"

    def __post_init__(self):
        if self.input_dim is not None and self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.unc_width < 1:
            raise ValidationError(f"unc_width must be >= 1, got {self.unc_width}")
        if not self.margin > 0:
            raise ValidationError(f"margin must be > 0, got {self.margin}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValidationError(f"need 0 <= warmup_epochs <= epochs, got {self.warmup_epochs}/{self.epochs}")
        if not 0 < self.final_lr <= self.base_lr:
            raise ValidationError(f"need 0 < final_lr <= base_lr, got {self.final_lr}/{self.base_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown head config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSORS}

    def map(self, fn) -> "HeadParams":
        return HeadParams(**{k: fn(v) for k, v in self.tensors().items()})

    def zip_map(self, other: "HeadParams", fn) -> "HeadParams":
        o = other.tensors()
        return HeadParams(**{k: fn(v, o[k]) for k, v in self.tensors().items()})

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    def equals(self, other: "HeadParams") -> bool:
        o = other.tensors()
        return all(np.array_equal(v, o[k]) for k, v in self.tensors().items())


@dataclass
class AdamState:
    step: int
    m: HeadParams
    v: HeadParams

    @classmethod
    def zeros_like(cls, params: HeadParams) -> "AdamState":
        return cls(0, params.map(np.zeros_like), params.map(np.zeros_like))


@dataclass
class TrainingLog:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    pair_agreement: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def init_head(config: HeadConfig) -> HeadParams:
    """Glorot-uniform weights, zero biases, fully determined by ``config.seed``."""
    if config.input_dim is None:
        raise ValidationError("HeadConfig.input_dim must be set before initialising a head")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    d, w = config.input_dim, config.unc_width

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return HeadParams(
        W1=glorot(d, w),
        b1=np.zeros(w),
        W2=glorot(w, w),
        b2=np.zeros(w),
        W3=glorot(w, 1),
        b3=np.zeros(1),
    )


def softplus(z):
    # exp(z) underflows below z ~ -745; the floor keeps outputs strictly positive
    return np.maximum(np.logaddexp(0.0, z), TINY)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _lrelu(h, slope):
    return np.where(h > 0, h, slope * h)


def _forward_cache(params: HeadParams, X: np.ndarray, slope: float):
    h1 = X @ params.W1 + params.b1
    a1 = _lrelu(h1, slope)
    h2 = a1 @ params.W2 + params.b2
    a2 = _lrelu(h2, slope)
    z = (a2 @ params.W3 + params.b3)[:, 0]
    return softplus(z), (X, h1, a1, h2, a2, z)


def _as_inputs(params: HeadParams, e) -> np.ndarray:
    X = np.asarray(e, dtype=np.float64)
    if X.shape[-1] != params.input_dim:
        raise ValidationError(f"input dimension {X.shape[-1]} does not match head input {params.input_dim}")
    if not np.isfinite(X).all():
        raise ValidationError("non-finite head input")
    return X


def forward(params: HeadParams, e, leaky_slope: float = 0.01):
    """Uncertainty of one embedding (1-d input) or of each row of a matrix.

    Rows are scored one at a time: BLAS kernels differ by batch shape, and
    scores must not depend on what else is in the batch.
    """
    X = _as_inputs(params, e)
    if X.ndim == 1:
        return float(_forward_cache(params, X[None, :], leaky_slope)[0][0])
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = _forward_cache(params, X[i : i + 1], leaky_slope)[0][0]
    return out


def _backward(params: HeadParams, cache, du: np.ndarray, slope: float) -> HeadParams:
    X, h1, a1, h2, a2, z = cache
    dz = (du * _sigmoid(z))[:, None]
    dW3 = a2.T @ dz
    db3 = dz.sum(axis=0)
    dh2 = (dz @ params.W3.T) * np.where(h2 > 0, 1.0, slope)
    dW2 = a1.T @ dh2
    db2 = dh2.sum(axis=0)
    dh1 = (dh2 @ params.W2.T) * np.where(h1 > 0, 1.0, slope)
    dW1 = X.T @ dh1
    db1 = dh1.sum(axis=0)
    return HeadParams(dW1, db1, dW2, db2, dW3, db3)


def loss_indicator(l1, l2):
    """+1 where the first loss is strictly larger, else -1 (ties included)."""
    return np.where(np.asarray(l1) > np.asarray(l2), 1.0, -1.0)


def ranking_loss(u1, u2, l1, l2, m: float = 0.1) -> tuple[float, int]:
    s = float(loss_indicator(l1, l2))
    return max(0.0, m - s * (u1 - u2)), int(s)


def ranking_loss_grad(params: HeadParams, e1, e2, l1, l2, m: float = 0.1, leaky_slope: float = 0.01) -> HeadParams:
    """Exact gradient of the pair hinge w.r.t. every head parameter."""
    X = _as_inputs(params, np.stack([np.asarray(e1, float), np.asarray(e2, float)]))
    u, cache = _forward_cache(params, X, leaky_slope)
    s = float(loss_indicator(l1, l2))
    active = m - s * (u[0] - u[1]) > 0
    du = np.array([-s, s]) if active else np.zeros(2)
    return _backward(params, cache, du, leaky_slope)


def lr_at_epoch(epoch: int, config: HeadConfig) -> float:
    """Constant warmup at ``base_lr`` followed by cosine decay to ``final_lr``.

    The decay reaches ``final_lr`` exactly at the last epoch.
    """
    if not 0 <= epoch < config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.base_lr
    span = config.epochs - 1 - config.warmup_epochs
    t = 1.0 if span <= 0 else (epoch - config.warmup_epochs) / span
    return config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1.0 + math.cos(math.pi * t))


def adamw_step(params: HeadParams, grads: HeadParams, state: AdamState, lr: float, config: HeadConfig):
    """One AdamW update: decoupled weight decay, then the bias-corrected Adam step."""
    for name, g in grads.tensors().items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainingError(f"non-finite gradient in {name} at optimizer step {state.step + 1} ({bad} entries)")
    b1, b2, wd = config.beta1, config.beta2, config.weight_decay
    t = state.step + 1
    m = state.m.zip_map(grads, lambda mo, g: b1 * mo + (1.0 - b1) * g)
    v = state.v.zip_map(grads, lambda vo, g: b2 * vo + (1.0 - b2) * g * g)
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new = {}
    mt, vt = m.tensors(), v.tensors()
    for name, p in params.tensors().items():
        p = p - lr * wd * p
        new[name] = p - lr * (mt[name] / c1) / (np.sqrt(vt[name] / c2) + ADAM_EPS)
    return HeadParams(**new), AdamState(t, m, v)


def _batch_objective(params, X, l, partner, config: HeadConfig):
    """Mean batch objective, gradient and pair-agreement count."""
    u, cache = _forward_cache(params, X, config.leaky_slope)
    B = X.shape[0]
    s = loss_indicator(l, l[partner])
    gap = s * (u - u[partner])
    agree = int((gap >= config.margin).sum())
    if config.objective == "l2":
        diff = u - l
        return float(np.mean(diff * diff)), _backward(params, cache, 2.0 * diff / B, config.leaky_slope), agree
    hinge = config.margin - gap
    active = hinge > 0
    if config.skip_tied_pairs:
        active &= l != l[partner]
    loss = float(np.where(active, hinge, 0.0).sum() / B)
    du = np.zeros(B)
    coef = np.where(active, s, 0.0) / B
    np.add.at(du, np.arange(B), -coef)
    np.add.at(du, partner, coef)
    return loss, _backward(params, cache, du, config.leaky_slope), agree


def train_head(
    E: EmbeddingSet,
    L: LossVector,
    config: HeadConfig,
    init: HeadParams | None = None,
    max_epochs: int | None = None,
):
    """Fit a head on frozen embeddings to rank samples by task loss.

    Returns ``(params, log)``. Each epoch shuffles the samples, splits them into
    batches of ``batch_size`` (a trailing batch of one sample is dropped), and
    takes one AdamW step per batch. ``max_epochs`` stops early while keeping
    the learning-rate schedule of the full ``config.epochs`` run.
    """
    X_all = np.asarray(E.data, dtype=np.float64)
    l_all = np.asarray(L.values, dtype=np.float64)
    n = X_all.shape[0]
    if n == 0:
        raise ValidationError("empty dataset")
    if l_all.shape[0] != n:
        raise ValidationError(f"{n} embeddings but {l_all.shape[0]} losses")
    if config.input_dim is None:
        config = dataclasses.replace(config, input_dim=X_all.shape[1])
    elif config.input_dim != X_all.shape[1]:
        raise ValidationError(f"config input_dim {config.input_dim} but embeddings have dim {X_all.shape[1]}")
    if n < config.batch_size:
        raise ValidationError(f"need n >= batch_size, got n={n}, batch_size={config.batch_size}")

    params = init if init is not None else init_head(config)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    log = TrainingLog()
    stop = config.epochs if max_epochs is None else min(max_epochs, config.epochs)
    for epoch in range(stop):
        lr = lr_at_epoch(epoch, config)
        order = rng.permutation(n)
        total, agree, pairs = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            B = idx.size
            if B < 2:
                continue
            partner = (np.arange(B) + rng.integers(1, B, size=B)) % B
            loss, grads, ok = _batch_objective(params, X_all[idx], l_all[idx], partner, config)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            params, state = adamw_step(params, grads, state, lr, config)
            total += loss * B
            agree += ok
            pairs += B
        log.loss.append(total / pairs)
        log.lr.append(lr)
        log.pair_agreement.append(agree / pairs)
    return params, log


def save_head(path, params: HeadParams, config: HeadConfig) -> None:
    """Write all tensors as 64-byte aligned float64 sections behind a JSON manifest."""
    sections, chunks, offset = [], [], 0
    for name, t in params.tensors().items():
        raw = np.ascontiguousarray(t, dtype="<f8").tobytes()
        sections.append({"name": name, "shape": list(t.shape), "offset": offset})
        pad = (-len(raw)) % ALIGN
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = {"kind": "head", "dtype": "<f8", "config": config.to_dict(), "sections": sections}
    write_binary(path, header, b"".join(chunks))


def load_head(path) -> tuple[HeadParams, HeadConfig]:
    header, payload = read_binary(path)
    if header.get("kind") != "head":
        raise ValidationError(f"{path} is not a head file (kind={header.get('kind')!r})")
    try:
        config = HeadConfig.from_dict(header["config"])
        tensors = {}
        for sec in header["sections"]:
            shape = tuple(sec["shape"])
            nbytes = int(np.prod(shape)) * 8
            start = sec["offset"]
            if start + nbytes > len(payload):
                raise ValidationError(f"payload size mismatch in {path}: section {sec['name']} truncated")
            tensors[sec["name"]] = np.frombuffer(payload[start : start + nbytes], dtype="<f8").reshape(shape).copy()
        params = HeadParams(**{k: tensors[k] for k in TENSORS})
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed head manifest in {path}: {exc}") from None
    return params, config


def log_to_json(log: TrainingLog) -> str:
    return json.dumps(log.to_dict(), indent=1)
