"""Cluster utilization reports for trained networks (JSON)."""
from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .ghca import MemoryNetwork
from .model import DUIANetwork


def _histogram(counts: np.ndarray) -> dict:
    """Counts of clusters per utilization bucket: 0, 1, 2-9, 10-99, ..."""
    counts = np.asarray(counts, dtype=np.uint64)
    edges = [0, 1, 2, 10, 100, 1_000, 10_000, 100_000]
    out = {}
    for lo, hi in zip(edges, edges[1:] + [None]):
        sel = counts >= lo if hi is None else (counts >= lo) & (counts < hi)
        label = f"{lo}+" if hi is None else (str(lo) if hi == lo + 1 else f"{lo}-{hi - 1}")
        out[label] = int(sel.sum())
    return out


def _norms(centers: np.ndarray) -> dict:
    n = np.linalg.norm(centers, axis=1)
    return {"min": float(n.min()), "mean": float(n.mean()), "max": float(n.max())}


def network_report(mem: MemoryNetwork) -> dict:
    return {
        "k1": mem.k1,
        "branching": mem.branching,
        "d": mem.d,
        "hit_rate": mem.hit_rate(),
        "train_clusters_used": int((mem.train_hits > 0).sum()),
        "test_clusters_used": int((mem.test_hits > 0).sum()),
        "train_hits": [int(x) for x in mem.train_hits],
        "test_hits": [int(x) for x in mem.test_hits],
        "train_histogram": _histogram(mem.train_hits),
        "test_histogram": _histogram(mem.test_hits),
        "level1_norms": _norms(mem.level1),
        "level2_norms": _norms(mem.level2),
    }


def inspect(net: DUIANetwork) -> dict:
    nets: dict[str, Optional[dict]] = {
        "user_net": network_report(net.user_net) if net.user_net is not None else None,
        "item_net": network_report(net.item_net) if net.item_net is not None else None,
    }
    return {
        "seed": net.cfg.seed,
        "step": net.step,
        "components": {k: getattr(net.cfg.duia, k) for k in ("uie", "upbe", "uhse", "aux")},
        "store_entries": len(net.store) if net.store is not None else 0,
        "networks": nets,
    }


def inspect_text(net: DUIANetwork) -> str:
    return json.dumps(inspect(net), indent=2, sort_keys=True) + "\n"
