"""AUC and metric records."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with average ranks for ties.

    Equals P(score_pos > score_neg) + 0.5 * P(tie). Returns ``None`` when only
    one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> Optional[float]:
    """O(P*N) pairwise reference for :func:`auc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = scores[labels == 1]
    n = scores[labels != 1]
    if len(p) == 0 or len(n) == 0:
        return None
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    losses: dict = field(default_factory=dict)
    auc: dict = field(default_factory=dict)  # task -> {overall, low_active, high_active}; None when absent
    hit_rate: dict = field(default_factory=dict)  # network -> fraction of level-1 clusters hit
    n_eval: int = 0
    wall_clock_s: Optional[float] = None

    def to_json(self, include_timing: bool = False) -> str:
        obj = asdict(self)
        if not include_timing:
            obj.pop("wall_clock_s")
        return json.dumps(obj, sort_keys=True)


def write_metrics(records, path, include_timing: bool = False) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json(include_timing) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
