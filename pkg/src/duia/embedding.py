"""Learnable id -> vector tables with hashed bucketing and stop-gradient reads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numeric import DimensionError

_MULT = np.uint64(0x9E3779B97F4A7C15)


def bucket_of(ids, n_buckets: int, hashing: str = "modulo") -> np.ndarray:
    """Map raw ids into ``[0, n_buckets)``.

    ``modulo`` keeps dense synthetic ids collision-free; ``multiply_shift`` scrambles
    sparse raw ids (Knuth multiplicative hash, high 32 bits, then range-reduced).
    """
    ids = np.asarray(ids).astype(np.uint64)
    if hashing == "modulo":
        return (ids % np.uint64(n_buckets)).astype(np.int64)
    if hashing == "multiply_shift":
        with np.errstate(over="ignore"):
            h = (ids * _MULT) >> np.uint64(32)
        return ((h * np.uint64(n_buckets)) >> np.uint64(32)).astype(np.int64)
    raise ValueError(f"unknown hashing scheme {hashing!r}")


@dataclass
class EmbeddingRead:
    """Result of a lookup. ``backward`` routes gradients into the table unless detached."""

    value: np.ndarray
    rows: np.ndarray
    table: "EmbeddingTable"
    detached: bool

    def backward(self, dvalue: np.ndarray) -> None:
        if self.detached:
            return
        dvalue = np.asarray(dvalue, dtype=np.float64)
        if dvalue.shape != self.value.shape:
            raise DimensionError(f"gradient {dvalue.shape} does not match read {self.value.shape}")
        self.table.accumulate(self.rows.reshape(-1), dvalue.reshape(-1, self.table.dim))


class EmbeddingTable:
    def __init__(self, name: str, n_buckets: int, dim: int, rng: Optional[np.random.Generator] = None,
                 hashing: str = "modulo", init_scale: Optional[float] = None):
        if n_buckets <= 0 or dim <= 0:
            raise ValueError("bucket count and dim must be positive")
        self.name = name
        self.n_buckets = int(n_buckets)
        self.dim = int(dim)
        self.hashing = hashing
        bucket_of(np.zeros(1, dtype=np.int64), 1, hashing)  # validates the scheme name
        if rng is None:
            self.weight = np.zeros((self.n_buckets, self.dim))
        else:
            bound = init_scale if init_scale is not None else 1.0 / np.sqrt(self.dim)
            self.weight = rng.uniform(-bound, bound, size=(self.n_buckets, self.dim))
        self._grad_rows: list[np.ndarray] = []
        self._grad_vals: list[np.ndarray] = []

    def rows(self, ids) -> np.ndarray:
        return bucket_of(ids, self.n_buckets, self.hashing)

    def embed(self, ids, detached: bool = False) -> EmbeddingRead:
        """Look up ids (any shape); the value has shape ``ids.shape + (dim,)``."""
        rows = self.rows(np.asarray(ids))
        return EmbeddingRead(self.weight[rows], rows, self, detached)

    def accumulate(self, rows: np.ndarray, grads: np.ndarray) -> None:
        self._grad_rows.append(np.asarray(rows, dtype=np.int64))
        self._grad_vals.append(grads)

    def pop_gradient(self) -> tuple[np.ndarray, np.ndarray]:
        """Return and clear the accumulated ``(rows, row_grads)``."""
        if not self._grad_rows:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.dim))
        rows = np.concatenate(self._grad_rows)
        vals = np.concatenate(self._grad_vals)
        self._grad_rows.clear()
        self._grad_vals.clear()
        return rows, vals


def embed(table: EmbeddingTable, id, detached: bool = False) -> np.ndarray:
    return table.embed(id, detached).value


def pool_group(vectors, weights, dim: Optional[int] = None) -> np.ndarray:
    """Weighted mean of a list of vectors; an empty list pools to the zero vector.

    ``dim`` sizes the zero vector for empty input (a length-0 array otherwise).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(vectors) != len(weights):
        raise DimensionError(f"{len(vectors)} vectors but {len(weights)} weights")
    if np.any(weights < 0):
        raise ValueError("pooling weights must be non-negative")
    if len(vectors) == 0:
        return np.zeros(dim or 0)
    total = weights.sum()
    if total <= 0:
        return np.zeros(vectors.shape[1])
    return weights @ vectors / total


@dataclass
class PoolTape:
    read: EmbeddingRead
    norm_weights: np.ndarray  # (n, k)


def pool_batch(table: EmbeddingTable, ids: np.ndarray, weights: np.ndarray, detached: bool = False):
    """Weighted mean pooling of a padded ``(n, k)`` id matrix.

    Padding slots carry weight 0. Rows with no weight pool to the zero vector.
    Returns the pooled ``(n, dim)`` array and a tape for :func:`pool_backward`.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("pooling weights must be non-negative")
    read = table.embed(ids, detached)
    total = weights.sum(axis=1, keepdims=True)
    norm = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    pooled = np.einsum("nk,nkd->nd", norm, read.value)
    return pooled, PoolTape(read, norm)


def pool_backward(tape: PoolTape, dpooled: np.ndarray) -> None:
    live = tape.norm_weights != 0.0
    if tape.read.detached or not live.any():
        return
    rows = tape.read.rows[live]
    grads = tape.norm_weights[live][:, None] * np.broadcast_to(dpooled[:, None, :], tape.read.value.shape)[live]
    tape.read.table.accumulate(rows, grads)


@dataclass
class FeatureBundle:
    """Feature ids for one event, grouped as the towers and backbone consume them."""

    user_id: int
    item_id: int
    category_id: int
    attrs: list[int] = field(default_factory=list)
    pref_categories: list[int] = field(default_factory=list)
    pref_scores: list[float] = field(default_factory=list)  # raw 0-100 preference scores
    history: list[int] = field(default_factory=list)  # item ids, oldest first

    max_history: int = 50

    def __post_init__(self):
        if len(self.pref_categories) != len(self.pref_scores):
            raise DimensionError("every preference category needs a score")
        if len(self.history) > self.max_history:
            self.history = self.history[-self.max_history:]

    @property
    def pref_weights(self) -> list[float]:
        return [s / 100.0 for s in self.pref_scores]
