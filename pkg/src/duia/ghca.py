"""Gradient-based hierarchical clustering over a two-level codebook.

A :class:`MemoryNetwork` holds ``K1`` first-level centers and ``K1 * B``
second-level centers; the children of parent ``i`` occupy rows
``[i * B, (i + 1) * B)``. Assignment is by maximum dot product. Updates pull
the chosen centers toward the assigned vector with the squared-distance loss
``sigmoid(v . mu) * ||v - mu||^2``, where the sigmoid gate is held constant.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .numeric import DimensionError, Optimizer, rowdot, sigmoid

MAGIC = b"GHCA"
FORMAT_VERSION = 1


class SnapshotError(ValueError):
    """A snapshot could not be parsed; ``offset`` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(SnapshotError):
    def __init__(self, expected: int, actual: int, offset: int):
        super().__init__(f"checksum mismatch: expected {expected:#010x}, actual {actual:#010x}", offset)
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class ClusterLossWeights:
    rho: float = 0.05
    lam: float = 0.05
    eta: float = 0.05

    def __post_init__(self):
        for name in ("rho", "lam", "eta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


class Retrieval(NamedTuple):
    center1: np.ndarray
    sim1: float
    center2: np.ndarray
    sim2: float
    index1: int
    index2: int


class ClusterUpdate(NamedTuple):
    loss1: np.ndarray  # per-sample gated losses, level 1
    loss2: np.ndarray
    grad1: np.ndarray  # gradient of the summed losses w.r.t. level-1 centers
    grad2: np.ndarray


class MemoryNetwork:
    def __init__(self, d: int, k1: int, branching: int, rng: Optional[np.random.Generator] = None,
                 global_level2: bool = False):
        if d <= 0 or k1 <= 0 or branching <= 0:
            raise ValueError("d, k1 and branching must be positive")
        self.d = int(d)
        self.k1 = int(k1)
        self.branching = int(branching)
        self.global_level2 = global_level2
        if rng is None:
            self.level1 = np.zeros((self.k1, self.d))
            self.level2 = np.zeros((self.k1 * self.branching, self.d))
        else:
            bound = 1.0 / np.sqrt(self.d)
            self.level1 = rng.uniform(-bound, bound, size=(self.k1, self.d))
            self.level2 = rng.uniform(-bound, bound, size=(self.k1 * self.branching, self.d))
        self.train_hits = np.zeros(self.k1, dtype=np.uint64)
        self.test_hits = np.zeros(self.k1, dtype=np.uint64)

    @property
    def k2(self) -> int:
        return self.k1 * self.branching

    def params(self) -> list[np.ndarray]:
        return [self.level1, self.level2]

    def _check(self, v) -> tuple[np.ndarray, bool]:
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        v2 = v[None, :] if single else v
        if v2.ndim != 2 or v2.shape[1] != self.d:
            raise DimensionError(f"vector width {v.shape[-1] if v.ndim else 0} does not match network dim {self.d}")
        return v2, single

    def _search(self, v: np.ndarray):
        s1 = v @ self.level1.T
        i = np.argmax(s1, axis=1)  # first maximum wins ties
        sim1 = s1[np.arange(len(v)), i]
        if self.global_level2:
            s2 = v @ self.level2.T
            j = np.argmax(s2, axis=1)
            sim2 = s2[np.arange(len(v)), j]
        else:
            b = self.branching
            children = self.level2.reshape(self.k1, b, self.d)[i]  # (n, B, d)
            s2 = np.einsum("nbd,nd->nb", children, v)
            jj = np.argmax(s2, axis=1)
            j = i * b + jj
            sim2 = s2[np.arange(len(v)), jj]
        return i, j, sim1, sim2

    def assign(self, v):
        """Most similar level-1 center, then most similar child of it.

        Returns ``(i, j)`` with ``j`` a global level-2 row index; arrays for a batch.
        """
        v2, single = self._check(v)
        i, j, _, _ = self._search(v2)
        if single:
            return int(i[0]), int(j[0])
        return i, j

    def cluster_update(self, v, i, j, sample_in=True) -> ClusterUpdate:
        """Gated squared-distance losses and center gradients for assigned vectors.

        The gate and ``v`` are constants: the gradient w.r.t. a center is
        ``-2 * gate * (v - mu)`` and nothing flows back into ``v``. Samples with
        ``sample_in`` false contribute nothing and leave the hit counters alone.
        """
        v2, _ = self._check(v)
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        mask = np.broadcast_to(np.asarray(sample_in, dtype=bool), (len(v2),))
        if np.any((i < 0) | (i >= self.k1)) or np.any((j < 0) | (j >= self.k2)):
            raise IndexError("cluster index out of range")
        if not self.global_level2 and np.any(j // self.branching != i):
            raise IndexError("level-2 index lies outside the parent's block")
        grad1 = np.zeros_like(self.level1)
        grad2 = np.zeros_like(self.level2)
        loss1 = np.zeros(len(v2))
        loss2 = np.zeros(len(v2))
        if mask.any():
            vs, ii, jj = v2[mask], i[mask], j[mask]
            for centers, idx, grad, loss in ((self.level1, ii, grad1, loss1), (self.level2, jj, grad2, loss2)):
                mu = centers[idx]
                diff = vs - mu
                gate = sigmoid(rowdot(vs, mu))
                loss[mask] = gate * rowdot(diff, diff)
                np.add.at(grad, idx, -2.0 * gate[:, None] * diff)
            np.add.at(self.train_hits, ii, np.uint64(1))
        return ClusterUpdate(loss1, loss2, grad1, grad2)

    def retrieve_many(self, q, count_test_hits: bool = False):
        """Batch retrieval. Returns ``(ok, i, j, sim1, sim2)``; ``ok`` is false
        where either similarity is negative."""
        q2, _ = self._check(q)
        i, j, sim1, sim2 = self._search(q2)
        ok = (sim1 >= 0.0) & (sim2 >= 0.0)
        if count_test_hits and ok.any():
            np.add.at(self.test_hits, i[ok], np.uint64(1))
        return ok, i, j, sim1, sim2

    def retrieve(self, q, count_test_hits: bool = False) -> Optional[Retrieval]:
        ok, i, j, s1, s2 = self.retrieve_many(np.asarray(q, dtype=np.float64).reshape(1, -1), count_test_hits)
        if not ok[0]:
            return None
        return Retrieval(self.level1[i[0]].copy(), float(s1[0]), self.level2[j[0]].copy(), float(s2[0]), int(i[0]), int(j[0]))

    def hit_rate(self) -> float:
        return float(np.count_nonzero(self.test_hits) / self.k1)

    def reset_test_hits(self) -> None:
        self.test_hits[:] = 0

    def copy(self) -> "MemoryNetwork":
        other = MemoryNetwork(self.d, self.k1, self.branching, global_level2=self.global_level2)
        other.level1 = self.level1.copy()
        other.level2 = self.level2.copy()
        other.train_hits = self.train_hits.copy()
        other.test_hits = self.test_hits.copy()
        return other

    def equals(self, other: "MemoryNetwork") -> bool:
        return (
            (self.d, self.k1, self.branching) == (other.d, other.k1, other.branching)
            and np.array_equal(self.level1, other.level1)
            and np.array_equal(self.level2, other.level2)
            and np.array_equal(self.train_hits, other.train_hits)
            and np.array_equal(self.test_hits, other.test_hits)
        )


def weighted_vector(mu, q) -> np.ndarray:
    """``sigmoid(mu . q) * mu`` row-wise; both inputs are treated as constants."""
    mu = np.asarray(mu, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if mu.shape != q.shape:
        raise DimensionError(f"center {mu.shape} and query {q.shape} differ")
    if mu.ndim == 1:
        return sigmoid(float(mu @ q)) * mu
    return sigmoid(rowdot(mu, q))[:, None] * mu


def hit_rate(net: MemoryNetwork) -> float:
    return net.hit_rate()


# Binary persistence. Layout (little-endian): magic, version u32, d u32, K1 u32,
# B u32, level-1 f64, level-2 f64, train hits u64[K1], test hits u64[K1], crc32 u32.

def snapshot_bytes(net: MemoryNetwork) -> bytes:
    if not (np.all(np.isfinite(net.level1)) and np.all(np.isfinite(net.level2))):
        raise ValueError("refusing to persist non-finite centers")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, net.d, net.k1, net.branching))
    buf.write(np.ascontiguousarray(net.level1, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(net.level2, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(net.train_hits, dtype="<u8").tobytes())
    buf.write(np.ascontiguousarray(net.test_hits, dtype="<u8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def snapshot_write(net: MemoryNetwork, sink: BinaryIO) -> None:
    sink.write(snapshot_bytes(net))


def parse_snapshot(data: bytes, offset: int = 0) -> tuple[MemoryNetwork, int]:
    """Parse one network starting at ``offset``; returns it and the end offset."""
    start = offset

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise SnapshotError(f"truncated memory-network segment: need {n} bytes, {len(data) - offset} left", offset)
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    magic = take(4)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}", offset - 4)
    version, d, k1, b = struct.unpack("<IIII", take(16))
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported format version {version}", offset - 16)
    if d == 0 or k1 == 0 or b == 0:
        raise SnapshotError("zero dimension in header", offset - 12)
    level1 = np.frombuffer(take(8 * k1 * d), dtype="<f8").reshape(k1, d).astype(np.float64)
    level2 = np.frombuffer(take(8 * k1 * b * d), dtype="<f8").reshape(k1 * b, d).astype(np.float64)
    train_hits = np.frombuffer(take(8 * k1), dtype="<u8").astype(np.uint64)
    test_hits = np.frombuffer(take(8 * k1), dtype="<u8").astype(np.uint64)
    body_end = offset
    (expected,) = struct.unpack("<I", take(4))
    actual = zlib.crc32(data[start:body_end])
    if expected != actual:
        raise ChecksumError(expected, actual, body_end)
    net = MemoryNetwork(d, k1, b)
    net.level1, net.level2 = level1, level2
    net.train_hits, net.test_hits = train_hits, test_hits
    return net, offset


def snapshot_read(source: BinaryIO) -> MemoryNetwork:
    data = source.read()
    net, end = parse_snapshot(data)
    if end != len(data):
        raise SnapshotError(f"{len(data) - end} trailing bytes after segment", end)
    return net


class GHCAClusterer(ClusterMixin, TransformerMixin, BaseEstimator):
    """Streaming two-level clusterer with a scikit-learn interface.

    ``fit`` makes one streaming pass in mini-batches; ``partial_fit`` continues
    it. ``predict`` returns level-1 labels and ``transform`` the dot-product
    similarities to the level-1 centers.
    """

    def __init__(self, n_clusters=8, branching=4, learning_rate=0.01, optimizer="adam", batch_size=1,
                 sample_rate=1.0, global_level2=False, random_state=None):
        self.n_clusters = n_clusters
        self.branching = branching
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.sample_rate = sample_rate
        self.global_level2 = global_level2
        self.random_state = random_state

    def _init(self, n_features: int) -> None:
        rng = np.random.default_rng(self.random_state)
        self.memory_ = MemoryNetwork(n_features, self.n_clusters, self.branching, rng, self.global_level2)
        self.optimizer_ = Optimizer(self.optimizer, self.learning_rate)
        self._sample_rng = np.random.default_rng(rng.integers(2**63))
        self.n_features_in_ = n_features
        self.n_steps_ = 0

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self._init(X.shape[1])
        self.partial_fit(X)
        self.labels_ = self.memory_.assign(X)[0]
        return self

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "memory_"):
            self._init(X.shape[1])
        net = self.memory_
        for start in range(0, len(X), self.batch_size):
            batch = X[start:start + self.batch_size]
            sample_in = self._sample_rng.random(len(batch)) < self.sample_rate
            i, j = net.assign(batch)
            upd = net.cluster_update(batch, i, j, sample_in)
            self.optimizer_.begin()
            self.optimizer_.update(net.params(), [upd.grad1, upd.grad2], scale=1.0 / len(batch))
            self.n_steps_ += 1
        return self

    def predict(self, X):
        check_is_fitted(self, "memory_")
        X = check_array(X, dtype=np.float64)
        return self.memory_.assign(X)[0]

    def predict_hierarchy(self, X):
        check_is_fitted(self, "memory_")
        X = check_array(X, dtype=np.float64)
        return self.memory_.assign(X)

    def transform(self, X):
        check_is_fitted(self, "memory_")
        X = check_array(X, dtype=np.float64)
        return X @ self.memory_.level1.T

    @property
    def cluster_centers_(self) -> np.ndarray:
        check_is_fitted(self, "memory_")
        return self.memory_.level1

    @property
    def subcluster_centers_(self) -> np.ndarray:
        check_is_fitted(self, "memory_")
        return self.memory_.level2
