"""Interest-enhancement features built from the memory networks.

* UIE: the user's nearest user-cluster centers, similarity-weighted, joined with a
  learned personal vector and passed through a generalization layer.
* UPBE: per-user vectors pulled toward the user clusters that best match the
  items the user consumed.
* UHSE: history items replaced by their nearest item-cluster centers and pooled.

All functions are batched over rows. Centers, tower outputs and UPBE store
vectors are constants on the ranking path; only generalization layers and
personal vectors receive ranking-loss gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ghca import MemoryNetwork, weighted_vector
from .numeric import DimensionError, Mlp, Tape, rowdot, sigmoid

SLOTS = ("uie_l1", "uie_l2", "upbe_l1", "upbe_l2", "uhse")


class PersonalizedStore:
    """user id -> (personal vector, UPBE level-1 vector, UPBE level-2 vector)."""

    def __init__(self, d: int):
        self.d = d
        self.index: dict[int, int] = {}
        self.user_ids = np.zeros(0, dtype=np.int64)
        self.personal = np.zeros((0, d))
        self.upbe1 = np.zeros((0, d))
        self.upbe2 = np.zeros((0, d))

    def __len__(self) -> int:
        return len(self.index)

    def arrays(self) -> list[np.ndarray]:
        return [self.personal, self.upbe1, self.upbe2]

    def reserve(self, capacity: int) -> None:
        """Pre-size the row arrays so they never reallocate during training.

        Optimizer moment buffers are keyed by array identity, so the arrays must
        not be replaced once training starts.
        """
        if capacity <= len(self.personal):
            return
        n = len(self.index)
        grown = []
        for arr in self.arrays():
            new = np.zeros((capacity, self.d))
            new[:n] = arr[:n]
            grown.append(new)
        self.personal, self.upbe1, self.upbe2 = grown
        ids = np.full(capacity, -1, dtype=np.int64)
        ids[:n] = self.user_ids[:n]
        self.user_ids = ids

    def rows(self, users, create: bool = False) -> np.ndarray:
        """Row index per user; ``-1`` for users absent from the store."""
        users = np.asarray(users, dtype=np.int64)
        out = np.empty(len(users), dtype=np.int64)
        for k, u in enumerate(users.tolist()):
            r = self.index.get(u)
            if r is None and create:
                r = len(self.index)
                if r >= len(self.personal):
                    raise RuntimeError("store capacity exhausted; call reserve() before training")
                self.index[u] = r
                self.user_ids[r] = u
            out[k] = -1 if r is None else r
        return out

    def read(self, which: str, users) -> np.ndarray:
        arr = {"personal": self.personal, "upbe1": self.upbe1, "upbe2": self.upbe2}[which]
        rows = self.rows(users)
        out = np.zeros((len(rows), self.d))
        known = rows >= 0
        out[known] = arr[rows[known]]
        return out

    def record(self, user: int):
        r = self.index.get(int(user))
        if r is None:
            z = np.zeros(self.d)
            return z, z.copy(), z.copy()
        return self.personal[r].copy(), self.upbe1[r].copy(), self.upbe2[r].copy()

    def entries(self):
        """Entries in insertion order as ``(user_id, personal, upbe1, upbe2)``."""
        for u, r in self.index.items():
            yield u, self.personal[r], self.upbe1[r], self.upbe2[r]

    def equals(self, other: "PersonalizedStore") -> bool:
        if self.d != other.d or list(self.index) != list(other.index):
            return False
        n = len(self.index)
        return all(np.array_equal(a[:n], b[:n]) for a, b in zip(self.arrays(), other.arrays()))


def make_gen_layer(d: int, rng: Optional[np.random.Generator]) -> Mlp:
    """Generalization layer: ``2d -> d (relu) -> d (linear)``."""
    if rng is None:
        return Mlp.zeros([2 * d, d, d])
    return Mlp.build([2 * d, d, d], rng)


@dataclass
class GatedTape:
    rows: np.ndarray  # batch rows that passed the gate
    tape: Optional[Tape]


def _gated_forward(gen: Mlp, x: np.ndarray, ok: np.ndarray, d: int):
    out = np.zeros((len(x), d))
    rows = np.flatnonzero(ok)
    if len(rows) == 0:
        return out, GatedTape(rows, None)
    y, tape = gen.forward(x[rows])
    out[rows] = y
    return out, GatedTape(rows, tape)


def _gated_backward(gen: Mlp, gt: GatedTape, dout: np.ndarray):
    """Returns ``(dx for the gated rows, parameter grads)``; zeros when nothing passed."""
    if gt.tape is None:
        return np.zeros((0, gen.n_in)), [np.zeros_like(p) for p in gen.params()]
    return gen.backward(gt.tape, dout[gt.rows])


# UIE

@dataclass
class UieTape:
    user_rows: np.ndarray
    level_tapes: list


def uie_enhance(net: MemoryNetwork, store: PersonalizedStore, gens, v_user, users,
                count_test_hits: bool = False):
    """Enhancement vectors from the user's nearest level-1 and level-2 centers.

    Rows where either retrieved center has negative similarity get zero vectors.
    Returns ``(uie_l1, uie_l2, tape)``.
    """
    v_user = np.atleast_2d(np.asarray(v_user, dtype=np.float64))
    ok, i, j, _, _ = net.retrieve_many(v_user, count_test_hits)
    user_rows = store.rows(np.atleast_1d(users))
    personal = np.zeros_like(v_user)
    known = user_rows >= 0
    personal[known] = store.personal[user_rows[known]]
    outs, tapes = [], []
    for gen, mu in ((gens[0], net.level1[i]), (gens[1], net.level2[j])):
        x = np.concatenate([weighted_vector(mu, v_user), personal], axis=1)
        out, gt = _gated_forward(gen, x, ok, net.d)
        outs.append(out)
        tapes.append(gt)
    return outs[0], outs[1], UieTape(user_rows, tapes)


def uie_backward(gens, tape: UieTape, d1, d2, d: int):
    """Gradients into the two UIE generalization layers and the personal vectors.

    Returns ``(gen_grads_l1, gen_grads_l2, personal_rows, personal_row_grads)``.
    """
    grads = []
    p_rows, p_grads = [], []
    for gen, gt, dout in zip(gens, tape.level_tapes, (d1, d2)):
        dx, g = _gated_backward(gen, gt, dout)
        grads.append(g)
        if len(gt.rows):
            rows = tape.user_rows[gt.rows]
            keep = rows >= 0
            p_rows.append(rows[keep])
            p_grads.append(dx[keep, d:])
    rows = np.concatenate(p_rows) if p_rows else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(p_grads) if p_grads else np.zeros((0, d))
    return grads[0], grads[1], rows, vals


def uie_train_step(net: MemoryNetwork, v_user, sample_in):
    """Assign then update the user network; returns the per-sample losses and center gradients."""
    v_user = np.atleast_2d(np.asarray(v_user, dtype=np.float64))
    i, j = net.assign(v_user)
    return net.cluster_update(v_user, i, j, sample_in)


# UPBE

@dataclass
class UpbeUpdate:
    loss1: np.ndarray
    loss2: np.ndarray
    rows1: np.ndarray  # store rows receiving level-1 gradients
    grad1: np.ndarray
    rows2: np.ndarray
    grad2: np.ndarray


def upbe_update(net: MemoryNetwork, store: PersonalizedStore, users, v_item, v_user, y) -> UpbeUpdate:
    """Pull each positive user's store vectors toward the user clusters nearest the item.

    Negative events, and levels whose found center is anti-correlated with the
    user vector, leave the store untouched. Centers get no gradient here.
    """
    v_item = np.atleast_2d(np.asarray(v_item, dtype=np.float64))
    v_user = np.atleast_2d(np.asarray(v_user, dtype=np.float64))
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y))
    n = len(v_item)
    loss1, loss2 = np.zeros(n), np.zeros(n)
    empty_rows, empty_grad = np.zeros(0, dtype=np.int64), np.zeros((0, net.d))
    pos = np.flatnonzero(y == 1)
    if len(pos) == 0:
        return UpbeUpdate(loss1, loss2, empty_rows, empty_grad, empty_rows, empty_grad)
    i, j = net.assign(v_item[pos])
    results = []
    for centers, idx, arr, loss in ((net.level1, i, "upbe1", loss1), (net.level2, j, "upbe2", loss2)):
        mu = centers[idx]
        keep = rowdot(mu, v_user[pos]) >= 0.0
        sel = pos[keep]
        if len(sel) == 0:
            results.append((empty_rows, empty_grad))
            continue
        rows = store.rows(users[sel], create=True)
        p = getattr(store, arr)[rows]
        mu = mu[keep]
        diff = mu - p
        gate = sigmoid(rowdot(mu, p))
        loss[sel] = gate * rowdot(diff, diff)
        results.append((rows, -2.0 * gate[:, None] * diff))
    (r1, g1), (r2, g2) = results
    return UpbeUpdate(loss1, loss2, r1, g1, r2, g2)


def upbe_enhance(store: PersonalizedStore, gens, users):
    """Store vectors through their generalization layers (companion slot zero).

    Users absent from the store, or whose vector for a level has never been
    pulled (still all zero), get zero vectors. Store vectors are constants here.
    """
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    rows = store.rows(users)
    known = rows >= 0
    d = store.d
    outs, tapes = [], []
    for gen, arr in ((gens[0], store.upbe1), (gens[1], store.upbe2)):
        x = np.zeros((len(users), 2 * d))
        x[known, :d] = arr[rows[known]]
        ok = x[:, :d].any(axis=1)
        out, gt = _gated_forward(gen, x, ok, d)
        outs.append(out)
        tapes.append(gt)
    return outs[0], outs[1], tapes


# UHSE

def uhse_train_step(net: MemoryNetwork, v_item, y, sample_in):
    """Cluster positive, sampled item vectors into the item network."""
    v_item = np.atleast_2d(np.asarray(v_item, dtype=np.float64))
    mask = (np.atleast_1d(np.asarray(y)) == 1) & np.broadcast_to(np.asarray(sample_in, dtype=bool), (len(v_item),))
    i, j = net.assign(v_item)
    return net.cluster_update(v_item, i, j, mask)


def uhse_pool(net: MemoryNetwork, history_vectors: np.ndarray, history_index: np.ndarray,
              count_test_hits: bool = False, use_level1: bool = False) -> np.ndarray:
    """Mean of the nearest item centers over each row's history.

    ``history_vectors`` holds item vectors for the distinct history items and
    ``history_index`` is an ``(n, H)`` matrix of rows into it (``-1`` pads).
    Items gated off by negative similarity are skipped; an empty row pools to 0.
    With ``use_level1`` the pooled vector is level-1 and level-2 concatenated.
    Returns the pooled rows and a mask of rows with at least one retrieved item.
    """
    n, _ = history_index.shape
    width = 2 * net.d if use_level1 else net.d
    pooled = np.zeros((n, width))
    if len(history_vectors) == 0:
        return pooled, np.zeros(n, dtype=bool)
    ok, i, j, _, _ = net.retrieve_many(history_vectors)
    centers = net.level2[j]
    if use_level1:
        centers = np.concatenate([net.level1[i], centers], axis=1)
    valid = history_index >= 0
    valid[valid] = ok[history_index[valid]]
    if count_test_hits and valid.any():
        np.add.at(net.test_hits, i[history_index[valid]], np.uint64(1))
    counts = valid.sum(axis=1)
    safe = np.where(valid, history_index, 0)
    summed = np.einsum("nh,nhd->nd", valid.astype(np.float64), centers[safe])
    has = counts > 0
    pooled[has] = summed[has] / counts[has, None]
    return pooled, has


def uhse_enhance(net: MemoryNetwork, gen: Mlp, history_vectors, history_index, count_test_hits: bool = False,
                 use_level1: bool = False):
    """History-enhancement vector: pooled centers through the UHSE layer; zero for empty histories.

    The layer input is ``pooled (+) 0``, or ``level-1 (+) level-2`` pooled centers
    with ``use_level1``. Returns ``(uhse, tape)``.
    """
    history_vectors = np.asarray(history_vectors, dtype=np.float64).reshape(-1, net.d)
    pooled, has = uhse_pool(net, history_vectors, np.atleast_2d(history_index), count_test_hits, use_level1)
    x = pooled if use_level1 else np.concatenate([pooled, np.zeros_like(pooled)], axis=1)
    return _gated_forward(gen, x, has, net.d)


def bundle(uie_l1, uie_l2, upbe_l1, upbe_l2, uhse) -> np.ndarray:
    """Concatenate the five enhancement vectors in slot order."""
    parts = [np.asarray(p, dtype=np.float64) for p in (uie_l1, uie_l2, upbe_l1, upbe_l2, uhse)]
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1 or len({p.shape[:-1] for p in parts}) != 1:
        raise DimensionError(f"enhancement slots have mismatched shapes {[p.shape for p in parts]}")
    return np.concatenate(parts, axis=-1)
