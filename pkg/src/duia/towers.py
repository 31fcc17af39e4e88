"""Auxiliary user/item two-tower model producing the vectors that get clustered."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .numeric import Mlp, bce_loss, rowdot, sigmoid


class TwoTower:
    def __init__(self, user_in: int, item_in: int, hidden: Sequence[int], d: int, rng: np.random.Generator):
        self.d = d
        self.user = Mlp.build([user_in, *hidden, d], rng)
        self.item = Mlp.build([item_in, *hidden, d], rng)

    @classmethod
    def zeros(cls, user_in: int, item_in: int, hidden: Sequence[int], d: int) -> "TwoTower":
        t = cls.__new__(cls)
        t.d = d
        t.user = Mlp.zeros([user_in, *hidden, d])
        t.item = Mlp.zeros([item_in, *hidden, d])
        return t

    def params(self) -> list[np.ndarray]:
        return self.user.params() + self.item.params()

    def user_vector(self, x):
        return self.user.forward(x)

    def item_vector(self, x):
        return self.item.forward(x)


def positive_weight(merge_score):
    """Up-weighting of positive samples: ``1 + sigmoid(merge_score)``, in (1, 2)."""
    return 1.0 + sigmoid(merge_score)


def aux_score(v_user, v_item):
    v_user = np.asarray(v_user, dtype=np.float64)
    v_item = np.asarray(v_item, dtype=np.float64)
    if v_user.ndim == 1:
        return sigmoid(float(v_user @ v_item))
    return sigmoid(rowdot(v_user, v_item))


def aux_loss(v_user, v_item, y, merge_score):
    """Weighted BCE of ``sigmoid(v_user . v_item)``.

    Returns per-sample ``(loss, d_user, d_item)``. The merge score only weights
    positives; negatives always have weight 1.
    """
    v_user = np.asarray(v_user, dtype=np.float64)
    v_item = np.asarray(v_item, dtype=np.float64)
    single = v_user.ndim == 1
    u = np.atleast_2d(v_user)
    v = np.atleast_2d(v_item)
    logit = rowdot(u, v)
    loss, dlogit = bce_loss(logit, np.atleast_1d(y), positive_weight(np.atleast_1d(merge_score)))
    du = dlogit[:, None] * v
    dv = dlogit[:, None] * u
    if single:
        return float(loss[0]), du[0], dv[0]
    return loss, du, dv
