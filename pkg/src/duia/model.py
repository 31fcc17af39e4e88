"""The DUIA ranking model: parameter container, streaming trainer and scorer."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import enhancement as enh
from .config import ExperimentConfig
from .data import Cohorts, DataError, EventLog, UserFeatures, compute_cohorts
from .embedding import EmbeddingTable, pool_backward, pool_batch
from .ghca import ClusterLossWeights, MemoryNetwork
from .metrics import MetricsRecord, auc
from .numeric import Mlp, Optimizer
from .ranking import Backbone, merge_score, mtl_loss, total_loss
from .towers import TwoTower, aux_loss

TASKS = ("valid_consume", "long_view")
LOSS_TERMS = ("mtl", "aux", "uie_l1", "uie_l2", "upbe_l1", "upbe_l2", "uhse_l1", "uhse_l2", "total")
TABLES = ("user", "attr", "category", "item")

# stable per-component seeds: adding or removing a component never shifts another's init
_STREAM = {"user": 1, "attr": 2, "category": 3, "item": 4, "towers": 5, "user_net": 6, "item_net": 7,
           "gen": 8, "backbone": 9, "sampling": 10, "reinit": 11, "backbone_enh": 12}


class NumericError(FloatingPointError):
    def __init__(self, step: int, terms: dict):
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.terms = terms


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM[name]])


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def sampling_uniform(seed: int, users: np.ndarray, event_index: np.ndarray) -> np.ndarray:
    """Reproducible U[0, 1) per (user id, event index)."""
    with np.errstate(over="ignore"):
        h = _mix64(np.asarray(users).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
                   ^ _mix64(np.asarray(event_index).astype(np.uint64) + np.uint64(seed & 0xFFFFFFFF)))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class StreamContext:
    """History pointers over a time-ordered stream.

    Event ``k``'s history is the user's valid-consume items strictly before ``k``,
    newest ``max_history`` kept, left-padded with ``-1``.
    """

    def __init__(self, log: EventLog, max_history: int = 50):
        n = len(log)
        self.max_history = max_history
        order = np.lexsort((np.arange(n), log.user))
        consumed = (log.behavior[order] >= 1).astype(np.int64)
        excl = np.cumsum(consumed) - consumed
        users_sorted = log.user[order]
        first = np.ones(n, dtype=bool)
        first[1:] = users_sorted[1:] != users_sorted[:-1]
        group_base = np.maximum.accumulate(np.where(first, excl, 0)) if n else excl
        self.items = log.item[order][consumed.astype(bool)]
        self.end = np.empty(n, dtype=np.int64)
        self.start = np.empty(n, dtype=np.int64)
        self.end[order] = excl
        self.start[order] = group_base

    def history(self, idx: np.ndarray) -> np.ndarray:
        h = self.max_history
        pos = self.end[idx, None] - h + np.arange(h)
        valid = pos >= self.start[idx, None]
        out = np.full(pos.shape, -1, dtype=np.int64)
        out[valid] = self.items[pos[valid]]
        return out


class ItemCatalog:
    """item id -> category id, last observation wins."""

    def __init__(self, *logs: EventLog):
        items = np.concatenate([lg.item for lg in logs]) if logs else np.zeros(0, dtype=np.int64)
        cats = np.concatenate([lg.category for lg in logs]) if logs else np.zeros(0, dtype=np.int64)
        rev_items, rev_pos = np.unique(items[::-1], return_index=True)
        self.item_ids = rev_items
        self.categories = cats[::-1][rev_pos]

    def category(self, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        if len(self.item_ids) == 0:
            return np.zeros(len(items), dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.item_ids, items), len(self.item_ids) - 1)
        return np.where(self.item_ids[pos] == items, self.categories[pos], 0)


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    cats: np.ndarray
    labels: np.ndarray  # (n, 2)
    attrs: np.ndarray  # (n, A), -1 pads
    pref_cats: np.ndarray  # (n, P), -1 pads
    pref_w: np.ndarray  # (n, P) scores / 100
    history: np.ndarray  # (n, H) item ids, -1 pads
    sample_in: np.ndarray  # (n,) bool

    def __len__(self) -> int:
        return len(self.users)


def make_batch(log: EventLog, idx: np.ndarray, features: UserFeatures, context: StreamContext,
               history_idx: Optional[np.ndarray] = None, sample_in: Optional[np.ndarray] = None) -> Batch:
    users = log.user[idx]
    attrs, cats, scores = features.lookup(users)
    hist = context.history(idx if history_idx is None else history_idx)
    if sample_in is None:
        sample_in = np.zeros(len(idx), dtype=bool)
    return Batch(users, log.item[idx], log.category[idx], log.labels()[idx] if len(log) else np.zeros((0, 2)),
                 attrs, cats, np.where(cats >= 0, scores / 100.0, 0.0), hist, sample_in)


class DUIANetwork:
    """All learnable state of a DUIA ranker plus the config it was built from."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        m, dc = cfg.model, cfg.duia
        e, d, seed = m.embedding_dim, m.d, cfg.seed
        self.tables = {name: EmbeddingTable(name, m.buckets, e, component_rng(seed, name), m.hashing)
                       for name in TABLES}
        self.feature_width = 6 * e
        self.duia = dc.any_component
        self.towers: Optional[TwoTower] = None
        self.user_net: Optional[MemoryNetwork] = None
        self.item_net: Optional[MemoryNetwork] = None
        self.store: Optional[enh.PersonalizedStore] = None
        self.gens: list[Mlp] = []
        if self.duia:
            self.towers = TwoTower(4 * e, 2 * e, list(m.tower_hidden), d, component_rng(seed, "towers"))
            if dc.uie or dc.upbe:
                self.user_net = MemoryNetwork(d, m.user_net.k1, m.user_net.branching,
                                              component_rng(seed, "user_net"), m.global_level2)
                self.store = enh.PersonalizedStore(d)
            if dc.uhse:
                self.item_net = MemoryNetwork(d, m.item_net.k1, m.item_net.branching,
                                              component_rng(seed, "item_net"), m.global_level2)
            grng = component_rng(seed, "gen")
            self.gens = [enh.make_gen_layer(d, grng) for _ in enh.SLOTS]
        self.backbone = Backbone(self.feature_width, component_rng(seed, "backbone"), m.backbone, 2,
                                 m.expert_sizes, m.tower_sizes, m.n_shared_experts, m.n_specific_experts)
        if self.duia:
            self.backbone.widen_input(5 * d, component_rng(seed, "backbone_enh"))
        self.step = 0

    @property
    def d(self) -> int:
        return self.cfg.model.d

    def gen_params(self) -> list[np.ndarray]:
        return [p for g in self.gens for p in g.params()]

    def dense_arrays(self) -> dict[str, np.ndarray]:
        """Every dense parameter array keyed by a stable name (snapshot order)."""
        out = {}
        for name, t in self.tables.items():
            out[f"table.{name}"] = t.weight
        if self.towers is not None:
            for k, p in enumerate(self.towers.params()):
                out[f"towers.{k}"] = p
        for k, p in enumerate(self.gen_params()):
            out[f"gen.{k}"] = p
        for k, p in enumerate(self.backbone.params()):
            out[f"backbone.{k}"] = p
        return out

    # forward pieces

    def encode(self, b: Batch, detached: bool):
        """Pooled feature groups ``(n, 6e)`` and the tapes needed to route gradients."""
        t = self.tables
        user = t["user"].embed(b.users, detached)
        attr, attr_tape = pool_batch(t["attr"], np.maximum(b.attrs, 0), (b.attrs >= 0).astype(np.float64), detached)
        pref, pref_tape = pool_batch(t["category"], np.maximum(b.pref_cats, 0), b.pref_w, detached)
        hist, hist_tape = pool_batch(t["item"], np.maximum(b.history, 0), (b.history >= 0).astype(np.float64),
                                     detached)
        item = t["item"].embed(b.items, detached)
        cat = t["category"].embed(b.cats, detached)
        feats = np.concatenate([user.value, attr, pref, hist, item.value, cat.value], axis=1)
        return feats, (user, attr_tape, pref_tape, hist_tape, item, cat)

    def encode_backward(self, tapes, dfeats: np.ndarray) -> None:
        e = self.cfg.model.embedding_dim
        user, attr_tape, pref_tape, hist_tape, item, cat = tapes
        user.backward(dfeats[:, 0:e])
        pool_backward(attr_tape, dfeats[:, e:2 * e])
        pool_backward(pref_tape, dfeats[:, 2 * e:3 * e])
        pool_backward(hist_tape, dfeats[:, 3 * e:4 * e])
        item.backward(dfeats[:, 4 * e:5 * e])
        cat.backward(dfeats[:, 5 * e:6 * e])

    def history_vectors(self, history: np.ndarray, catalog: ItemCatalog):
        """Item-tower vectors for the distinct history items and the index matrix into them."""
        present = history[history >= 0]
        uniq = np.unique(present)
        index = np.full(history.shape, -1, dtype=np.int64)
        if len(uniq) == 0:
            return np.zeros((0, self.d)), index
        index[history >= 0] = np.searchsorted(uniq, present)
        t = self.tables
        x = np.concatenate([t["item"].embed(uniq, detached=True).value,
                            t["category"].embed(catalog.category(uniq), detached=True).value], axis=1)
        return self.towers.item.predict(x), index

    def enhance(self, b: Batch, v_user: np.ndarray, catalog: ItemCatalog, count_test_hits: bool = False):
        dc = self.cfg.duia
        n, d = len(b), self.d
        zero = np.zeros((n, d))
        slots = [zero] * 5
        tapes: dict = {}
        if dc.uie:
            o1, o2, tapes["uie"] = enh.uie_enhance(self.user_net, self.store, self.gens[0:2], v_user, b.users,
                                                    count_test_hits)
            slots[0], slots[1] = o1, o2
        if dc.upbe:
            o1, o2, tapes["upbe"] = enh.upbe_enhance(self.store, self.gens[2:4], b.users)
            slots[2], slots[3] = o1, o2
        if dc.uhse:
            hv, hidx = self.history_vectors(b.history, catalog)
            slots[4], tapes["uhse"] = enh.uhse_enhance(self.item_net, self.gens[4], hv, hidx, count_test_hits,
                                                        self.cfg.model.uhse_use_level1)
        return enh.bundle(*slots), tapes

    def logits(self, b: Batch, catalog: ItemCatalog, count_test_hits: bool = False) -> np.ndarray:
        feats, _ = self.encode(b, detached=True)
        x = feats
        if self.duia:
            v_user = self.towers.user.predict(feats[:, :4 * self.cfg.model.embedding_dim])
            bundle, _ = self.enhance(b, v_user, catalog, count_test_hits)
            x = np.concatenate([feats, bundle], axis=1)
        return self.backbone.forward(x)[0]


class Trainer:
    """Streaming mini-batch training: one optimizer step per batch over every parameter group."""

    def __init__(self, net: DUIANetwork):
        self.net = net
        cfg = net.cfg
        self.opt = Optimizer(cfg.optim.kind, cfg.optim.lr)
        self.center_lr = cfg.optim.center_lr or cfg.optim.lr
        self.store_lr = cfg.optim.store_lr or cfg.optim.lr
        self.personal_lr = cfg.optim.personal_lr or cfg.optim.lr
        self.weights = ClusterLossWeights(cfg.duia.rho, cfg.duia.lam, cfg.duia.eta)
        self._last_hit: dict[int, np.ndarray] = {}
        self._reinit_rng = component_rng(cfg.seed, "reinit")

    def step(self, b: Batch, catalog: ItemCatalog) -> dict:
        net, cfg = self.net, self.net.cfg
        dc, e, d, n = cfg.duia, cfg.model.embedding_dim, net.d, len(b)
        terms = dict.fromkeys(LOSS_TERMS, 0.0)
        feats, enc_tapes = net.encode(b, detached=False)
        x = feats
        y = b.labels[:, 0]
        if net.duia:
            # towers read the same values detached: their input gradients are dropped, never routed to tables
            v_user, t_user = net.towers.user.forward(feats[:, :4 * e])
            v_item, t_item = net.towers.item.forward(feats[:, 4 * e:])
            if net.store is not None:
                net.store.rows(b.users, create=True)
            if dc.uie:
                upd_uie = enh.uie_train_step(net.user_net, v_user, b.sample_in)
                terms["uie_l1"], terms["uie_l2"] = upd_uie.loss1.mean(), upd_uie.loss2.mean()
            if dc.upbe:
                upd_upbe = enh.upbe_update(net.user_net, net.store, b.users, v_item, v_user, y)
                terms["upbe_l1"], terms["upbe_l2"] = upd_upbe.loss1.mean(), upd_upbe.loss2.mean()
            if dc.uhse:
                upd_uhse = enh.uhse_train_step(net.item_net, v_item, y, b.sample_in)
                terms["uhse_l1"], terms["uhse_l2"] = upd_uhse.loss1.mean(), upd_uhse.loss2.mean()
            bundle, enh_tapes = net.enhance(b, v_user, catalog)
            x = np.concatenate([feats, bundle], axis=1)
        logits, btape = net.backbone.forward(x)
        lm, dlogits = mtl_loss(logits, b.labels)
        terms["mtl"] = lm.mean()
        dx, bgrads = net.backbone.backward(btape, dlogits / n)
        net.encode_backward(enc_tapes, dx[:, :net.feature_width])

        if net.duia and dc.aux:
            ms = merge_score(logits, cfg.model.merge_weights)
            la, du, dv = aux_loss(v_user, v_item, y, ms)
            terms["aux"] = la.mean()
            _, g_user = net.towers.user.backward(t_user, du / n)
            _, g_item = net.towers.item.backward(t_item, dv / n)
        terms["total"] = total_loss(terms["mtl"], terms["aux"], (terms["uie_l1"], terms["uie_l2"]),
                                    (terms["upbe_l1"], terms["upbe_l2"]), (terms["uhse_l1"], terms["uhse_l2"]),
                                    self.weights)
        terms = {k: float(v) for k, v in terms.items()}
        if not all(np.isfinite(v) for v in terms.values()):
            raise NumericError(net.step + 1, terms)

        opt = self.opt
        opt.begin()
        opt.update(net.backbone.params(), bgrads)
        for table in net.tables.values():
            rows, grads = table.pop_gradient()
            opt.update_rows(table.weight, rows, grads)
        if net.duia:
            dB = dx[:, net.feature_width:]
            if dc.aux:
                opt.update(net.towers.params(), g_user + g_item)
            if dc.uie:
                g1, g2, prow, pgrad = enh.uie_backward(net.gens[0:2], enh_tapes["uie"], dB[:, 0:d], dB[:, d:2 * d], d)
                opt.update(net.gens[0].params() + net.gens[1].params(), g1 + g2)
                opt.update_rows(net.store.personal, prow, pgrad, lr=self.personal_lr)
                opt.update(net.user_net.params(), [upd_uie.grad1, upd_uie.grad2],
                           scale=self.weights.rho / n, lr=self.center_lr)
                self._maybe_reinit(net.user_net, upd_uie, v_user, b.sample_in)
            if dc.upbe:
                for slot, gt in zip((2, 3), enh_tapes["upbe"]):
                    _, g = enh._gated_backward(net.gens[slot], gt, dB[:, slot * d:(slot + 1) * d])
                    opt.update(net.gens[slot].params(), g)
                opt.update_rows(net.store.upbe1, upd_upbe.rows1, upd_upbe.grad1, scale=self.weights.lam / n,
                                lr=self.store_lr)
                opt.update_rows(net.store.upbe2, upd_upbe.rows2, upd_upbe.grad2, scale=self.weights.lam / n,
                                lr=self.store_lr)
            if dc.uhse:
                _, g = enh._gated_backward(net.gens[4], enh_tapes["uhse"], dB[:, 4 * d:5 * d])
                opt.update(net.gens[4].params(), g)
                opt.update(net.item_net.params(), [upd_uhse.grad1, upd_uhse.grad2],
                           scale=self.weights.eta / n, lr=self.center_lr)
                self._maybe_reinit(net.item_net, upd_uhse, v_item, b.sample_in & (y == 1))
        net.step += 1
        return terms

    def _maybe_reinit(self, mem: MemoryNetwork, upd, v: np.ndarray, sample_in: np.ndarray) -> None:
        """Optionally move level-1 centers idle for too long onto recent vectors."""
        patience = self.net.cfg.duia.reinit_dead_after
        if patience <= 0:
            return
        last = self._last_hit.setdefault(id(mem), np.zeros(mem.k1, dtype=np.int64))
        hit = np.unique(mem.assign(v[sample_in])[0]) if sample_in.any() else np.zeros(0, dtype=np.int64)
        last[hit] = self.net.step
        dead = np.flatnonzero(self.net.step - last > patience)
        if len(dead) == 0 or len(v) == 0:
            return
        pick = self._reinit_rng.integers(len(v), size=len(dead))
        b = mem.branching
        for c, k in zip(dead, pick):
            mem.level1[c] = v[k]
            mem.level2[c * b:(c + 1) * b] = v[k] + 0.01 * self._reinit_rng.standard_normal((b, mem.d))
            last[c] = self.net.step


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


class DUIARanker(BaseEstimator):
    """Multi-task ranker with dynamic user-interest augmentation.

    ``fit`` streams a time-ordered training log in mini-batches; ``predict_proba``
    scores events given the log that precedes them (for user histories).
    With every enhancement component switched off the model is the plain backbone.
    """

    def __init__(self, config: Optional[ExperimentConfig] = None):
        self.config = config

    def _cfg(self) -> ExperimentConfig:
        return (self.config or ExperimentConfig()).validate()

    def fit(self, X: EventLog, features: Optional[UserFeatures] = None, eval_log: Optional[EventLog] = None,
            callback=None):
        cfg = self._cfg()
        log = _check_log(X)
        if len(log) == 0:
            raise DataError("cannot fit on an empty log")
        self.features_ = features if features is not None else UserFeatures.empty()
        self.network_ = DUIANetwork(cfg)
        self.train_log_ = log
        self.cohorts_ = compute_cohorts(log, cfg.data.cohort_percentile)
        self.metrics_: list[MetricsRecord] = []
        if self.network_.store is not None:
            self.network_.store.reserve(len(np.unique(log.user)))
        trainer = Trainer(self.network_)
        context = StreamContext(log, cfg.data.max_history)
        catalog = ItemCatalog(log) if eval_log is None else ItemCatalog(log, eval_log)
        rates = np.where(self.cohorts_.is_low(log.user), cfg.duia.sample_rate_low, cfg.duia.sample_rate_high)
        sample_in = sampling_uniform(cfg.seed, log.user, np.arange(len(log))) < rates
        epochs = 1 if cfg.optim.single_pass else cfg.optim.epochs
        t0 = time.perf_counter()
        for epoch in range(epochs):
            sums = dict.fromkeys(LOSS_TERMS, 0.0)
            count = 0
            for idx in _batches(len(log), cfg.optim.batch_size):
                b = make_batch(log, idx, self.features_, context, sample_in=sample_in[idx])
                terms = trainer.step(b, catalog)
                for k, v in terms.items():
                    sums[k] += v * len(idx)
                count += len(idx)
            rec = MetricsRecord(step=self.network_.step, epoch=epoch + 1,
                                losses={k: v / count for k, v in sums.items()})
            if eval_log is not None and len(eval_log):
                self._evaluate_into(rec, eval_log, log)
            rec.wall_clock_s = time.perf_counter() - t0
            self.metrics_.append(rec)
            if callback is not None:
                callback(rec)
        return self

    @classmethod
    def from_network(cls, net: DUIANetwork, train_log: EventLog,
                     features: Optional[UserFeatures] = None) -> "DUIARanker":
        """Wrap a restored network; ``train_log`` supplies histories and cohorts."""
        est = cls(net.cfg)
        est.network_ = net
        est.train_log_ = _check_log(train_log)
        est.features_ = features if features is not None else UserFeatures.empty()
        est.cohorts_ = compute_cohorts(train_log, net.cfg.data.cohort_percentile)
        est.metrics_ = []
        return est

    def decision_function(self, X: EventLog, history_log: Optional[EventLog] = None,
                          count_test_hits: bool = False) -> np.ndarray:
        """Task logits ``(n, 2)``; ``history_log`` is the stream preceding ``X``."""
        check_is_fitted(self, "network_")
        log = _check_log(X)
        prior = self.train_log_ if history_log is None else _check_log(history_log)
        full = prior.concat(log)
        context = StreamContext(full, self.network_.cfg.data.max_history)
        catalog = ItemCatalog(prior, log)
        out = np.zeros((len(log), 2))
        offset = len(prior)
        for idx in _batches(len(log), self.network_.cfg.optim.eval_batch_size):
            b = make_batch(log, idx, self.features_, context, history_idx=idx + offset)
            out[idx] = self.network_.logits(b, catalog, count_test_hits)
        return out

    def predict_proba(self, X: EventLog, history_log: Optional[EventLog] = None) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X, history_log)))

    def evaluate(self, X: EventLog, history_log: Optional[EventLog] = None,
                 cohorts: Optional[Cohorts] = None) -> MetricsRecord:
        check_is_fitted(self, "network_")
        rec = MetricsRecord(step=self.network_.step, epoch=len(getattr(self, "metrics_", [])))
        t0 = time.perf_counter()
        self._evaluate_into(rec, X, history_log, cohorts)
        rec.wall_clock_s = time.perf_counter() - t0
        return rec

    def _evaluate_into(self, rec: MetricsRecord, log: EventLog, history_log=None, cohorts=None) -> None:
        net = self.network_
        for mem in (net.user_net, net.item_net):
            if mem is not None:
                mem.reset_test_hits()
        scores = self.decision_function(log, history_log, count_test_hits=True)
        cohorts = cohorts or self.cohorts_
        rec.auc = cohort_auc(scores, log, cohorts)
        rec.n_eval = len(log)
        rec.hit_rate = {
            "user_net": net.user_net.hit_rate() if net.user_net is not None and net.cfg.duia.uie else None,
            "item_net": net.item_net.hit_rate() if net.item_net is not None else None,
        }

    def score(self, X: EventLog, history_log: Optional[EventLog] = None) -> float:
        """Valid-consume AUC."""
        value = auc(self.decision_function(X, history_log)[:, 0], X.y_valid)
        return float("nan") if value is None else value


def cohort_auc(scores: np.ndarray, log: EventLog, cohorts: Cohorts) -> dict:
    low = cohorts.is_low(log.user)
    labels = log.labels()
    out = {}
    for t, task in enumerate(TASKS):
        out[task] = {
            "overall": auc(scores[:, t], labels[:, t]),
            "low_active": auc(scores[low, t], labels[low, t]) if low.any() else None,
            "high_active": auc(scores[~low, t], labels[~low, t]) if (~low).any() else None,
        }
    return out


def _check_log(X) -> EventLog:
    if not isinstance(X, EventLog):
        raise TypeError(f"expected an EventLog, got {type(X).__name__}")
    if len(X) > 1 and np.any(np.diff(X.timestamp) < 0):
        raise DataError("events must be in non-decreasing timestamp order")
    return X
