"""Interaction logs: synthetic generation, CSV ingestion, temporal split, cohorts."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

BEHAVIORS = ("view", "valid_consume", "long_view")
BEHAVIOR_CODE = {name: code for code, name in enumerate(BEHAVIORS)}
CSV_HEADER = ("user_id", "item_id", "category_id", "behavior_type", "timestamp")
LOW_ACTIVE, HIGH_ACTIVE = "low_active", "high_active"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    category_id: int
    behavior: str
    timestamp: int

    @property
    def valid_consume(self) -> bool:
        return self.behavior in ("valid_consume", "long_view")

    @property
    def long_view(self) -> bool:
        return self.behavior == "long_view"


class EventLog:
    """Columnar event stream. ``behavior`` holds codes 0 view, 1 valid_consume, 2 long_view."""

    def __init__(self, user, item, category, behavior, timestamp):
        self.user = np.asarray(user, dtype=np.int64)
        self.item = np.asarray(item, dtype=np.int64)
        self.category = np.asarray(category, dtype=np.int64)
        self.behavior = np.asarray(behavior, dtype=np.int8)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        n = len(self.user)
        if not all(len(a) == n for a in (self.item, self.category, self.behavior, self.timestamp)):
            raise DataError("event columns have different lengths")

    @classmethod
    def empty(cls) -> "EventLog":
        return cls([], [], [], [], [])

    @classmethod
    def from_events(cls, events: Sequence[InteractionEvent]) -> "EventLog":
        return cls(
            [e.user_id for e in events], [e.item_id for e in events], [e.category_id for e in events],
            [BEHAVIOR_CODE[e.behavior] for e in events], [e.timestamp for e in events],
        )

    def __len__(self) -> int:
        return len(self.user)

    def __getitem__(self, k: int) -> InteractionEvent:
        return InteractionEvent(int(self.user[k]), int(self.item[k]), int(self.category[k]),
                                BEHAVIORS[self.behavior[k]], int(self.timestamp[k]))

    def __iter__(self) -> Iterator[InteractionEvent]:
        for k in range(len(self)):
            yield self[k]

    def take(self, idx) -> "EventLog":
        return EventLog(self.user[idx], self.item[idx], self.category[idx], self.behavior[idx], self.timestamp[idx])

    def concat(self, other: "EventLog") -> "EventLog":
        return EventLog(*(np.concatenate([a, b]) for a, b in zip(self.columns(), other.columns())))

    def columns(self):
        return self.user, self.item, self.category, self.behavior, self.timestamp

    @property
    def y_valid(self) -> np.ndarray:
        return (self.behavior >= 1).astype(np.float64)

    @property
    def y_long(self) -> np.ndarray:
        return (self.behavior == 2).astype(np.float64)

    def labels(self) -> np.ndarray:
        return np.stack([self.y_valid, self.y_long], axis=1)

    def equals(self, other: "EventLog") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))


@dataclass
class UserFeatures:
    """Per-user profile features; ``-1`` marks an unpopulated slot."""

    user_ids: np.ndarray  # sorted raw ids
    attrs: np.ndarray  # (n, A) attribute ids, globally unique across fields
    pref_categories: np.ndarray  # (n, P)
    pref_scores: np.ndarray  # (n, P) raw scores 0-100

    @classmethod
    def empty(cls, n_attrs: int = 3, n_prefs: int = 4) -> "UserFeatures":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, n_attrs), dtype=np.int64),
                   np.zeros((0, n_prefs), dtype=np.int64), np.zeros((0, n_prefs)))

    def lookup(self, users: np.ndarray):
        """Feature rows for raw user ids; unknown users get empty rows."""
        users = np.asarray(users, dtype=np.int64)
        n_attr, n_pref = self.attrs.shape[1], self.pref_categories.shape[1]
        attrs = np.full((len(users), n_attr), -1, dtype=np.int64)
        cats = np.full((len(users), n_pref), -1, dtype=np.int64)
        scores = np.zeros((len(users), n_pref))
        if len(self.user_ids):
            pos = np.searchsorted(self.user_ids, users)
            pos = np.minimum(pos, len(self.user_ids) - 1)
            hit = self.user_ids[pos] == users
            attrs[hit] = self.attrs[pos[hit]]
            cats[hit] = self.pref_categories[pos[hit]]
            scores[hit] = self.pref_scores[pos[hit]]
        return attrs, cats, scores

    def to_json(self) -> dict:
        return {
            "user_ids": self.user_ids.tolist(), "attrs": self.attrs.tolist(),
            "pref_categories": self.pref_categories.tolist(), "pref_scores": self.pref_scores.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "UserFeatures":
        return cls(np.asarray(obj["user_ids"], dtype=np.int64), np.asarray(obj["attrs"], dtype=np.int64),
                   np.asarray(obj["pref_categories"], dtype=np.int64), np.asarray(obj["pref_scores"], dtype=np.float64))


@dataclass
class WorldModel:
    """Ground truth behind a synthetic log."""

    affinity: np.ndarray  # (communities, topics) in [0, 1]
    user_community: np.ndarray
    user_low_active: np.ndarray  # bool, the generative activity level
    item_topic: np.ndarray
    item_category: np.ndarray
    low_active_fraction: float

    @property
    def n_communities(self) -> int:
        return self.affinity.shape[0]

    @property
    def n_topics(self) -> int:
        return self.affinity.shape[1]

    def to_json(self) -> dict:
        return {
            "affinity": self.affinity.tolist(), "user_community": self.user_community.tolist(),
            "user_low_active": self.user_low_active.astype(int).tolist(), "item_topic": self.item_topic.tolist(),
            "item_category": self.item_category.tolist(), "low_active_fraction": self.low_active_fraction,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldModel":
        return cls(np.asarray(obj["affinity"], dtype=np.float64), np.asarray(obj["user_community"], dtype=np.int64),
                   np.asarray(obj["user_low_active"], dtype=bool), np.asarray(obj["item_topic"], dtype=np.int64),
                   np.asarray(obj["item_category"], dtype=np.int64), float(obj["low_active_fraction"]))


@dataclass
class GeneratorConfig:
    n_users: int = 10_000
    n_items: int = 2_000
    n_communities: int = 16
    n_topics: int = 16
    n_categories: int = 8
    latent_rank: int = 4
    low_active_fraction: float = 0.32
    high_active_mean_events: float = 74.0
    activity_ratio: float = 0.41  # low-active mean events / high-active mean events
    profile_ratio: float = 0.54  # share of profile slots populated for low-active users
    affinity_scale: float = 2.5
    affinity_bias: float = -1.2
    user_spread: float = 0.5  # per-user deviation of taste from the community
    label_noise: float = 0.3  # max per-user shrink toward the mean affinity
    exposure_interest: float = 0.5  # share of exposures drawn toward the user's tastes
    item_popularity_skew: float = 1.0  # Zipf exponent within a topic
    region_signal: float = 0.4
    pref_signal: float = 0.7
    n_pref_slots: int = 4
    days: int = 14
    start_timestamp: int = 1_700_000_000
    affinity: Optional[list] = None  # explicit community x topic matrix overrides the latent model

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_communities", "n_topics", "n_categories", "latent_rank",
                     "n_pref_slots", "days"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        for name in ("low_active_fraction", "activity_ratio", "profile_ratio", "label_noise",
                     "exposure_interest", "region_signal", "pref_signal"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.high_active_mean_events < 1:
            raise DataError("high_active_mean_events must be at least 1")
        if self.affinity is not None:
            a = np.asarray(self.affinity, dtype=np.float64)
            if a.shape != (self.n_communities, self.n_topics) or np.any((a < 0) | (a > 1)):
                raise DataError("explicit affinity must be a communities x topics matrix in [0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**obj)


ATTR_FIELDS = (2, 6, 16)  # gender, age bucket, region


@dataclass
class Dataset:
    events: EventLog
    world: WorldModel
    features: UserFeatures
    config: GeneratorConfig = field(default_factory=GeneratorConfig)


def _event_counts(cfg: GeneratorConfig, low: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mean_hi = cfg.high_active_mean_events
    mean = np.where(low, mean_hi * cfg.activity_ratio, mean_hi)
    shape = 6.0
    rate = rng.gamma(shape, (mean - 1.0) / shape)
    return 1 + rng.poisson(rate)


def generate(cfg: GeneratorConfig, seed: int) -> Dataset:
    """Draw a deterministic synthetic log with planted communities and topics."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_u, n_i, n_c, n_t = cfg.n_users, cfg.n_items, cfg.n_communities, cfg.n_topics

    community = rng.integers(n_c, size=n_u)
    low = rng.random(n_u) < cfg.low_active_fraction
    item_topic = rng.permutation(np.arange(n_i) % n_t)
    item_category = item_topic * cfg.n_categories // n_t

    topic_latent = rng.normal(size=(n_t, cfg.latent_rank)) / np.sqrt(cfg.latent_rank)
    comm_latent = rng.normal(size=(n_c, cfg.latent_rank))
    if cfg.affinity is not None:
        affinity = np.asarray(cfg.affinity, dtype=np.float64)
        user_aff = affinity[community]
    else:
        affinity = 1.0 / (1.0 + np.exp(-(cfg.affinity_scale * comm_latent @ topic_latent.T + cfg.affinity_bias)))
        user_latent = comm_latent[community] + cfg.user_spread * rng.normal(size=(n_u, cfg.latent_rank))
        user_aff = 1.0 / (1.0 + np.exp(-(cfg.affinity_scale * user_latent @ topic_latent.T + cfg.affinity_bias)))
    shrink = rng.uniform(0.0, cfg.label_noise, size=n_u)
    user_aff = (1.0 - shrink[:, None]) * user_aff + shrink[:, None] * affinity.mean()

    # items inside each topic ordered by Zipf popularity
    topic_items = [np.flatnonzero(item_topic == t) for t in range(n_t)]
    topic_probs = []
    for items in topic_items:
        w = 1.0 / np.arange(1, len(items) + 1) ** cfg.item_popularity_skew
        topic_probs.append(w / w.sum())

    counts = _event_counts(cfg, low, rng)
    users = np.repeat(np.arange(n_u), counts)
    n_ev = len(users)
    targeted = rng.random(n_ev) < cfg.exposure_interest
    taste = user_aff[users]
    cdf = np.cumsum(taste / taste.sum(axis=1, keepdims=True), axis=1)
    targeted_topic = np.minimum((cdf < rng.random(n_ev)[:, None]).sum(axis=1), n_t - 1)
    topic = np.where(targeted, targeted_topic, rng.integers(n_t, size=n_ev))
    item = np.empty(n_ev, dtype=np.int64)
    for t in range(n_t):
        sel = np.flatnonzero(topic == t)
        item[sel] = rng.choice(topic_items[t], size=len(sel), p=topic_probs[t])

    p_consume = user_aff[users, topic]
    valid = rng.random(n_ev) < p_consume
    long_view = valid & (rng.random(n_ev) < 0.5 * p_consume)
    behavior = valid.astype(np.int8) + long_view.astype(np.int8)

    span = cfg.days * 86_400
    ts = cfg.start_timestamp + rng.integers(span, size=n_ev)
    order = np.lexsort((np.arange(n_ev), ts))
    events = EventLog(users[order], item[order], item_category[item[order]], behavior[order], ts[order])

    features = _profile_features(cfg, community, low, user_aff, rng)
    world = WorldModel(affinity, community, low, item_topic, item_category, cfg.low_active_fraction)
    return Dataset(events, world, features, cfg)


def _profile_features(cfg, community, low, user_aff, rng) -> UserFeatures:
    n_u = len(community)
    p_fill = np.where(low, cfg.profile_ratio, 1.0)
    offsets = np.cumsum((0,) + ATTR_FIELDS[:-1])
    gender = rng.integers(ATTR_FIELDS[0], size=n_u)
    age = rng.integers(ATTR_FIELDS[1], size=n_u)
    region = np.where(rng.random(n_u) < cfg.region_signal, community % ATTR_FIELDS[2],
                      rng.integers(ATTR_FIELDS[2], size=n_u))
    attrs = np.stack([gender, age, region], axis=1) + offsets
    attrs[rng.random(attrs.shape) >= p_fill[:, None]] = -1

    n_p = cfg.n_pref_slots
    top = np.argsort(-user_aff, axis=1, kind="stable")[:, :n_p]
    noisy = rng.random((n_u, n_p)) >= cfg.pref_signal
    topics = np.where(noisy, rng.integers(cfg.n_topics, size=(n_u, n_p)), top)
    cats = topics * cfg.n_categories // cfg.n_topics
    scores = np.clip(np.round(100.0 * np.take_along_axis(user_aff, topics, axis=1)
                              + rng.normal(scale=5.0, size=(n_u, n_p))), 1, 100)
    empty = rng.random((n_u, n_p)) >= p_fill[:, None]
    cats[empty] = -1
    scores[empty] = 0.0
    return UserFeatures(np.arange(n_u, dtype=np.int64), attrs.astype(np.int64), cats.astype(np.int64), scores)


# CSV and sidecar I/O

def write_csv(log: EventLog, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in zip(log.user.tolist(), log.item.tolist(), log.category.tolist(),
                       log.behavior.tolist(), log.timestamp.tolist()):
            writer.writerow((row[0], row[1], row[2], BEHAVIORS[row[3]], row[4]))


def ingest_csv(path) -> EventLog:
    """Parse a ``user_id,item_id,category_id,behavior_type,timestamp`` file in order.

    Unknown behavior strings count as ``view``.
    """
    cols: list[list[int]] = [[], [], [], [], []]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: missing or wrong header, expected {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}: line {line}: expected 5 fields, got {len(row)}")
            try:
                u, i, c, ts = int(row[0]), int(row[1]), int(row[2]), int(row[4])
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None
            if min(u, i, c, ts) < 0:
                raise DataError(f"{path}: line {line}: negative id or timestamp")
            cols[0].append(u)
            cols[1].append(i)
            cols[2].append(c)
            cols[3].append(BEHAVIOR_CODE.get(row[3].strip(), 0))
            cols[4].append(ts)
    return EventLog(*cols)


def sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".world.json")


def save_dataset(ds: Dataset, csv_path) -> None:
    write_csv(ds.events, csv_path)
    sidecar = {"generator": asdict(ds.config), "world": ds.world.to_json(), "features": ds.features.to_json()}
    with open(sidecar_path(csv_path), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)


def load_dataset(csv_path) -> tuple[EventLog, UserFeatures, Optional[WorldModel]]:
    """Events plus profile features and ground truth when a sidecar exists."""
    events = ingest_csv(csv_path)
    side = sidecar_path(csv_path)
    if not side.exists():
        return events, UserFeatures.empty(), None
    try:
        with open(side) as fh:
            obj = json.load(fh)
        return events, UserFeatures.from_json(obj["features"]), WorldModel.from_json(obj["world"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{side}: malformed sidecar: {exc}") from None


# Splitting and cohorts

def temporal_split(events: EventLog, train_fraction: float = 0.8) -> tuple[EventLog, EventLog]:
    """Stable sort by timestamp, then cut at the requested fraction."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.argsort(events.timestamp, kind="stable")
    cut = int(round(train_fraction * len(events)))
    return events.take(order[:cut]), events.take(order[cut:])


@dataclass
class Cohorts:
    threshold: float
    users: np.ndarray  # sorted raw ids seen in training
    low: np.ndarray  # bool per entry of ``users``

    def is_low(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if len(self.users) == 0:
            return np.ones(len(users), dtype=bool)
        pos = np.minimum(np.searchsorted(self.users, users), len(self.users) - 1)
        known = self.users[pos] == users
        return np.where(known, self.low[pos], True)

    def low_fraction(self) -> float:
        return float(self.low.mean()) if len(self.low) else 0.0


def compute_cohorts(train: EventLog, percentile: float = 32.0) -> Cohorts:
    """Low-active iff a user's train valid-consume count is below the given percentile."""
    users, inv = np.unique(train.user, return_inverse=True)
    counts = np.bincount(inv, weights=train.y_valid, minlength=len(users))
    threshold = float(np.percentile(counts, percentile)) if len(users) else 0.0
    return Cohorts(threshold, users, counts < threshold)


def cohort_of(user_id: int, train: EventLog, percentile: float = 32.0) -> str:
    return LOW_ACTIVE if compute_cohorts(train, percentile).is_low([user_id])[0] else HIGH_ACTIVE
