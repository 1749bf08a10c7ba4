"""Data containers and their on-disk formats.

Binary files are a single UTF-8 JSON header line, space-padded so that header
plus newline is a multiple of 64 bytes, followed by a little-endian row-major
payload. The header carries the shape fields (``n``, ``d``, ...), the
``kind`` of container and optionally the payload ``dtype``. Small fixtures may
instead be plain CSV files (selected by the ``.csv`` extension).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ValidationError

ALIGN = 64
LOG_FLOOR = 1e-12

_DEFAULT_DTYPE = {
    "embeddings": "<f4",
    "tokens": "<f4",
    "multilabel": "|u1",
    "loss": "<f8",
    "uncertainty": "<f8",
}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_finite(a: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise ValidationError(f"non-finite value at row {row} of {what}")


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Frozen representations, one float32 row per sample."""

    data: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"embeddings must be 2-d, got shape {data.shape}")
        data = data.astype("<f4", copy=False)
        _check_finite(data, "embeddings")
        if data.shape[0] < 2:
            raise ValidationError("need at least 2 embeddings for nearest-neighbor retrieval")
        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise ValidationError(f"{len(ids)} ids for {data.shape[0]} embeddings")
        if len(set(ids)) != len(ids):
            raise ValidationError("embedding ids are not unique")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "ids", ids)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class MultiLabelSet:
    """Binary class-presence vectors, shape (n, K)."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError(f"multilabel matrix must be 2-d, got shape {labels.shape}")
        if labels.shape[1] < 2:
            raise ValidationError("multilabel sets need K >= 2 classes")
        if not np.isin(labels, (0, 1)).all():
            row = int(np.argwhere(~np.isin(labels, (0, 1)))[0][0])
            raise ValidationError(f"non-binary entry in multilabel row {row}")
        object.__setattr__(self, "labels", _readonly(labels.astype(np.uint8)))

    @property
    def count(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True, eq=False)
class SegMaskSet:
    """Per-pixel class indices, shape (n, h, w), values in [0, K-1]."""

    masks: np.ndarray
    num_classes: int

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ValidationError(f"mask stack must be 3-d (n, h, w), got shape {masks.shape}")
        if not np.issubdtype(masks.dtype, np.integer):
            if not np.array_equal(masks, np.round(masks)):
                raise ValidationError("mask values must be integer class indices")
        if not 1 <= self.num_classes <= 65536:
            raise ValidationError(f"num_classes must be in [1, 65536], got {self.num_classes}")
        if masks.size and (masks.min() < 0 or masks.max() >= self.num_classes):
            raise ValidationError(
                f"class index {int(masks.max())} out of range for K={self.num_classes}"
                if masks.max() >= self.num_classes
                else f"negative class index {int(masks.min())}"
            )
        dtype = np.uint8 if self.num_classes <= 256 else np.uint16
        object.__setattr__(self, "masks", _readonly(masks.astype(dtype)))

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]


LabelSet = Union[MultiLabelSet, SegMaskSet]


@dataclass(frozen=True, eq=False)
class LossVector:
    """Per-sample upstream task loss."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype="<f8")
        if values.ndim != 1:
            raise ValidationError(f"loss vector must be 1-d, got shape {values.shape}")
        if values.size == 0:
            raise ValidationError("empty loss vector")
        _check_finite(values, "losses")
        if (values < 0).any():
            raise ValidationError(f"negative loss at row {int(np.argmax(values < 0))}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Spatial token embeddings of one sample, laid out row-major on a rows x cols grid."""

    tokens: np.ndarray
    rows: int
    cols: int
    patch_px: int = 16

    def __post_init__(self):
        tokens = np.asarray(self.tokens).astype("<f4", copy=False)
        if tokens.ndim != 2 or tokens.shape[0] != self.rows * self.cols:
            raise ValidationError(
                f"token matrix shape {tokens.shape} does not hold a {self.rows}x{self.cols} grid"
            )
        _check_finite(tokens, "tokens")
        object.__setattr__(self, "tokens", _readonly(tokens))

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True, eq=False)
class UncertaintyVector:
    """Scalar uncertainty per sample, as emitted by a trained head."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype="<f8")
        if values.ndim != 1 or values.size == 0:
            raise ValidationError(f"uncertainty vector must be 1-d and non-empty, got shape {values.shape}")
        _check_finite(values, "uncertainties")
        if (values <= 0).any():
            raise ValidationError(f"non-positive uncertainty at row {int(np.argmax(values <= 0))}")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def count(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# binary format


def write_binary(path, header: dict, payload: bytes) -> None:
    """Write ``header`` as a padded JSON line followed by ``payload``."""
    text = json.dumps(header, separators=(",", ":"), sort_keys=True)
    raw = text.encode("utf-8")
    pad = (-(len(raw) + 1)) % ALIGN
    with open(path, "wb") as fh:
        fh.write(raw + b" " * pad + b"\n")
        fh.write(payload)


def read_binary(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValidationError(f"malformed header in {path}: no newline terminator")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed header in {path}: {exc}") from None
    if not isinstance(header, dict):
        raise ValidationError(f"malformed header in {path}: expected a JSON object")
    return header, blob[nl + 1 :]


def _int_field(header: dict, key: str, path) -> int:
    value = header.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ValidationError(f"malformed header in {path}: field {key!r} must be a non-negative integer")
    return value


def _payload_array(header: dict, payload: bytes, shape: tuple[int, ...], kind: str, path) -> np.ndarray:
    dtype = np.dtype(header.get("dtype", _DEFAULT_DTYPE.get(kind, "<f4")))
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ValidationError(
            f"payload size mismatch in {path}: header implies {expected} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def _check_kind(header: dict, want: str, path) -> None:
    kind = header.get("kind", want)
    if kind != want:
        raise ValidationError(f"{path} holds kind {kind!r}, expected {want!r}")


def _is_csv(path) -> bool:
    return Path(path).suffix.lower() == ".csv"


def _load_csv(path, dtype=float) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"unparseable CSV {path}: {exc}") from None


def save_embeddings(path, emb: EmbeddingSet) -> None:
    if _is_csv(path):
        np.savetxt(path, emb.data, delimiter=",", fmt="%.9g")
        return
    header = {"kind": "embeddings", "n": emb.count, "d": emb.dim, "ids": list(emb.ids), "dtype": "<f4"}
    write_binary(path, header, emb.data.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingSet:
    """Load an embedding file, binary or CSV, and validate it."""
    if _is_csv(path):
        return EmbeddingSet(_load_csv(path))
    header, payload = read_binary(path)
    _check_kind(header, "embeddings", path)
    n, d = _int_field(header, "n", path), _int_field(header, "d", path)
    data = _payload_array(header, payload, (n, d), "embeddings", path)
    ids = header.get("ids") or ()
    if ids and len(ids) != n:
        raise ValidationError(f"malformed header in {path}: {len(ids)} ids for n={n}")
    return EmbeddingSet(data, tuple(ids))


def save_labels(path, labels: LabelSet) -> None:
    if isinstance(labels, MultiLabelSet):
        if _is_csv(path):
            np.savetxt(path, labels.labels, delimiter=",", fmt="%d")
            return
        header = {"kind": "multilabel", "n": labels.count, "K": labels.num_classes, "dtype": "|u1"}
        write_binary(path, header, labels.labels.tobytes())
        return
    if _is_csv(path):
        raise ValidationError("segmentation masks have no CSV form")
    dtype = "|u1" if labels.num_classes <= 256 else "<u2"
    header = {
        "kind": "segmask",
        "n": labels.count,
        "K": labels.num_classes,
        "h": labels.height,
        "w": labels.width,
        "dtype": dtype,
    }
    write_binary(path, header, labels.masks.astype(dtype).tobytes())


def load_labels(path, kind: str, expected_count: int | None = None) -> LabelSet:
    """Load multilabel vectors or segmentation masks.

    If ``expected_count`` is given (the paired embedding count) the label count
    must match it.
    """
    if kind == "multilabel":
        if _is_csv(path):
            raw = _load_csv(path)
            if not np.isin(raw, (0, 1)).all():
                row = int(np.argwhere(~np.isin(raw, (0, 1)))[0][0])
                raise ValidationError(f"non-binary entry in multilabel row {row}")
            out = MultiLabelSet(raw.astype(np.uint8))
        else:
            header, payload = read_binary(path)
            _check_kind(header, "multilabel", path)
            n, K = _int_field(header, "n", path), _int_field(header, "K", path)
            out = MultiLabelSet(_payload_array(header, payload, (n, K), "multilabel", path))
    elif kind == "segmask":
        if _is_csv(path):
            raise ValidationError("segmentation masks have no CSV form")
        header, payload = read_binary(path)
        _check_kind(header, "segmask", path)
        n, K = _int_field(header, "n", path), _int_field(header, "K", path)
        h, w = _int_field(header, "h", path), _int_field(header, "w", path)
        header.setdefault("dtype", "|u1" if K <= 256 else "<u2")
        out = SegMaskSet(_payload_array(header, payload, (n, h, w), "segmask", path), K)
    else:
        raise ValidationError(f"unknown label kind {kind!r}")
    if expected_count is not None and out.count != expected_count:
        raise ValidationError(f"label count {out.count} does not match embedding count {expected_count}")
    return out


def _save_vector(path, values: np.ndarray, kind: str, extra: dict | None = None) -> None:
    if _is_csv(path):
        np.savetxt(path, values, fmt="%.17g")
        return
    header = {"kind": kind, "n": int(values.shape[0]), "dtype": "<f8", **(extra or {})}
    write_binary(path, header, values.astype("<f8").tobytes())


def _load_vector(path, kind: str) -> tuple[np.ndarray, dict]:
    if _is_csv(path):
        raw = _load_csv(path)
        if raw.shape[1] != 1:
            raise ValidationError(f"{path}: expected one value per row, got {raw.shape[1]} columns")
        return raw[:, 0], {}
    header, payload = read_binary(path)
    _check_kind(header, kind, path)
    n = _int_field(header, "n", path)
    return _payload_array(header, payload, (n,), kind, path), header


def save_losses(path, losses: LossVector) -> None:
    _save_vector(path, losses.values, "loss")


def load_losses(path, expected_count: int | None = None) -> LossVector:
    values, _ = _load_vector(path, "loss")
    out = LossVector(values)
    if expected_count is not None and out.count != expected_count:
        raise ValidationError(f"loss count {out.count} does not match embedding count {expected_count}")
    return out


def save_uncertainties(path, unc: UncertaintyVector) -> None:
    _save_vector(path, unc.values, "uncertainty", {"source": unc.source})


def load_uncertainties(path) -> UncertaintyVector:
    values, header = _load_vector(path, "uncertainty")
    return UncertaintyVector(values, header.get("source", ""))


def save_token_grids(path, grids: list[TokenGrid]) -> None:
    if not grids:
        raise ValidationError("no token grids to save")
    g0 = grids[0]
    for g in grids:
        if (g.rows, g.cols, g.dim, g.patch_px) != (g0.rows, g0.cols, g0.dim, g0.patch_px):
            raise ValidationError("token grids in one file must share rows, cols, dim and patch size")
    header = {
        "kind": "tokens",
        "n": len(grids),
        "r": g0.rows,
        "g": g0.cols,
        "d": g0.dim,
        "patch_px": g0.patch_px,
        "dtype": "<f4",
    }
    write_binary(path, header, b"".join(g.tokens.astype("<f4").tobytes() for g in grids))


def load_token_grids(path) -> list[TokenGrid]:
    header, payload = read_binary(path)
    _check_kind(header, "tokens", path)
    n, r, g, d = (_int_field(header, k, path) for k in ("n", "r", "g", "d"))
    p = header.get("patch_px", 16)
    data = _payload_array(header, payload, (n, r * g, d), "tokens", path)
    return [TokenGrid(data[i], r, g, p) for i in range(n)]


# ---------------------------------------------------------------------------
# task losses from cached logits


def bce_per_sample(logits, labels: MultiLabelSet) -> LossVector:
    """Mean binary cross-entropy over the K classes of each sample.

    ``log(sigmoid(z))`` is evaluated as ``-logaddexp(0, -z)`` and floored at
    ``log(1e-12)``; the same expression serves both label values, which makes
    the result exactly symmetric under ``(z, y) -> (-z, 1 - y)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = labels.labels.astype(np.float64)
    if z.shape != y.shape:
        raise ValidationError(f"logits shape {z.shape} does not match labels shape {y.shape}")
    floor = np.log(LOG_FLOOR)
    log_p = np.maximum(-np.logaddexp(0.0, -z), floor)
    log_q = np.maximum(-np.logaddexp(0.0, z), floor)
    loss = -(y * log_p + (1.0 - y) * log_q).mean(axis=1)
    return LossVector(loss + 0.0)
