"""Logistic regression objective and LIBSVM ingestion.

Examples are stored as a CSR matrix (``indptr``/``indices``/``values``) so
that sparse LIBSVM data stays sparse; models are dense numpy vectors.  With
``includes_bias`` the model has one extra trailing coordinate that multiplies
an implicit constant feature 1 and is not regularized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ObjectiveError",
    "Dataset",
    "Objective",
    "sigmoid",
    "loss",
    "grad",
    "clip",
    "load_libsvm",
    "write_libsvm",
    "accuracy",
]

PROB_FLOOR = 1e-12


class ObjectiveError(ValueError):
    """Dimension mismatches and malformed input files."""


@dataclass(frozen=True)
class Dataset:
    """Immutable sparse binary-classification data in CSR layout."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    dimension: int

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ObjectiveError("dimension must be positive")
        if self.indptr.ndim != 1 or self.indptr.size != self.labels.size + 1:
            raise ObjectiveError("indptr must have one entry per example plus one")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.dimension):
            raise ObjectiveError("feature index out of range")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ObjectiveError("labels must be 0 or 1")
        for arr in (self.indptr, self.indices, self.values, self.labels):
            arr.setflags(write=False)

    @classmethod
    def from_dense(cls, X: np.ndarray, y: Sequence[int]) -> "Dataset":
        X = np.asarray(X, dtype=float)
        rows, cols = np.nonzero(X)
        indptr = np.zeros(X.shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(np.cumsum(indptr), cols.astype(np.int64), X[rows, cols],
                   np.asarray(y, dtype=np.int8), X.shape[1])

    @property
    def size(self) -> int:
        return int(self.labels.size)

    def __len__(self) -> int:
        return self.size

    def row(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[j], self.indptr[j + 1]
        return self.indices[a:b], self.values[a:b]

    def dense(self) -> np.ndarray:
        X = np.zeros((self.size, self.dimension))
        rows = np.repeat(np.arange(self.size), np.diff(self.indptr))
        X[rows, self.indices] = self.values
        return X

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        starts, ends = self.indptr[idx], self.indptr[idx + 1]
        counts = ends - starts
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        take = np.concatenate([np.arange(a, b) for a, b in zip(starts, ends)]) if idx.size else \
            np.zeros(0, dtype=np.int64)
        take = take.astype(np.int64)
        return Dataset(indptr, self.indices[take], self.values[take], self.labels[idx],
                       self.dimension)


@dataclass(frozen=True)
class Objective:
    """Mean cross-entropy plus ``(lam/2) |w|^2`` over the non-bias weights.

    ``lam > 0`` makes the objective ``lam``-strongly convex.
    """

    lam: float = 0.0
    includes_bias: bool = True

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ObjectiveError("regularization must be >= 0")

    @property
    def mu(self) -> float:
        return self.lam

    def model_dim(self, ds: Dataset) -> int:
        return ds.dimension + (1 if self.includes_bias else 0)

    def zeros(self, ds: Dataset) -> np.ndarray:
        return np.zeros(self.model_dim(ds))


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def _check(obj: Objective, w: np.ndarray, ds: Dataset) -> None:
    if w.ndim != 1 or w.size != obj.model_dim(ds):
        raise ObjectiveError(
            f"model has dimension {w.size}, dataset needs {obj.model_dim(ds)}")


def _margins(obj: Objective, w: np.ndarray, ds: Dataset) -> np.ndarray:
    rows = np.repeat(np.arange(ds.size), np.diff(ds.indptr))
    z = np.bincount(rows, weights=ds.values * w[ds.indices], minlength=ds.size)
    if obj.includes_bias:
        z = z + w[-1]
    return z


def _weights(obj: Objective, w: np.ndarray) -> np.ndarray:
    return w[:-1] if obj.includes_bias else w


def loss(obj: Objective, w: np.ndarray, ds: Dataset) -> float:
    """Mean cross-entropy on ``ds`` plus the regularizer."""
    w = np.asarray(w, dtype=float)
    _check(obj, w, ds)
    reg = 0.5 * obj.lam * float(np.dot(_weights(obj, w), _weights(obj, w)))
    if ds.size == 0:
        return reg
    prob = np.clip(sigmoid(_margins(obj, w, ds)), PROB_FLOOR, 1 - PROB_FLOOR)
    y = ds.labels
    ce = -np.where(y == 1, np.log(prob), np.log1p(-prob))
    return float(np.mean(ce)) + reg


def grad(obj: Objective, w: np.ndarray, ds: Dataset, j: int) -> np.ndarray:
    """Gradient of the loss of example ``j`` (regularizer included)."""
    _check(obj, w, ds)
    idx, val = ds.row(j)
    z = float(np.dot(val, w[idx]))
    if obj.includes_bias:
        z += w[-1]
    err = _sigmoid_scalar(z) - float(ds.labels[j])
    g = np.zeros_like(w)
    g[idx] = err * val
    if obj.includes_bias:
        g[-1] = err
    if obj.lam:
        g[: ds.dimension] += obj.lam * w[: ds.dimension]
    return g


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def clip(g: np.ndarray, C: float) -> np.ndarray:
    """Scale ``g`` down to norm at most ``C``; identity below the threshold."""
    if not C > 0:
        raise ObjectiveError("clipping norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= C:
        return g
    factor = C / norm
    out = g * factor
    # rounding can leave the norm an ulp above C; shrink until clip is idempotent
    while float(np.linalg.norm(out)) > C:
        factor = np.nextafter(factor, 0.0)
        out = g * factor
    return out


def accuracy(obj: Objective, w: np.ndarray, ds: Dataset) -> float:
    """Fraction of examples whose predicted class (``sigmoid >= 1/2``) matches."""
    w = np.asarray(w, dtype=float)
    _check(obj, w, ds)
    if ds.size == 0:
        raise ObjectiveError("accuracy of an empty dataset is undefined")
    pred = (_margins(obj, w, ds) >= 0).astype(np.int8)
    return float(np.mean(pred == ds.labels))


def load_libsvm(path: str | Path, dimension_hint: int | None = None) -> Dataset:
    """Read ``<label> <index>:<value> ...`` lines with 1-based indices.

    Labels ``+1``/``1`` map to 1; ``-1``/``0`` map to 0.
    """
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    labels: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                lab = float(parts[0])
            except ValueError:
                raise ObjectiveError(f"{path}, line {lineno}: bad label {parts[0]!r}") from None
            if lab in (1.0,):
                labels.append(1)
            elif lab in (-1.0, 0.0):
                labels.append(0)
            else:
                raise ObjectiveError(f"{path}, line {lineno}: label {parts[0]!r} is not binary")
            last = 0
            for tok in parts[1:]:
                k, sep, v = tok.partition(":")
                try:
                    idx = int(k)
                    val = float(v)
                except ValueError:
                    raise ObjectiveError(f"{path}, line {lineno}: bad feature {tok!r}") from None
                if not sep or idx < 1:
                    raise ObjectiveError(f"{path}, line {lineno}: bad feature {tok!r}")
                if idx <= last:
                    raise ObjectiveError(f"{path}, line {lineno}: indices must increase")
                last = idx
                indices.append(idx - 1)
                values.append(val)
            indptr.append(len(indices))
    if not labels:
        raise ObjectiveError(f"{path}: no examples")
    dim = max(indices) + 1 if indices else 1
    if dimension_hint is not None:
        if dimension_hint < dim:
            raise ObjectiveError(f"{path}: index {dim} exceeds dimension hint {dimension_hint}")
        dim = dimension_hint
    return Dataset(np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64),
                   np.asarray(values, dtype=float), np.asarray(labels, dtype=np.int8), dim)


def write_libsvm(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` with labels as ``+1``/``-1``."""
    with open(path, "w", encoding="utf-8") as fh:
        for j in range(ds.size):
            idx, val = ds.row(j)
            feats = " ".join(f"{i + 1}:{v:.17g}" for i, v in zip(idx, val))
            lab = "+1" if ds.labels[j] == 1 else "-1"
            fh.write(f"{lab} {feats}".rstrip() + "\n")
