"""Multi-task ranking backbone (PLE-lite or shared-bottom) and loss assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ghca import ClusterLossWeights
from .numeric import DimensionError, Mlp, bce_loss

BACKBONE_KINDS = ("ple_lite", "shared_bottom")


def softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BackboneTape:
    expert_tapes: list
    expert_outs: list  # (n, E) per expert
    gate_tapes: list
    gate_probs: list  # (n, visible) per task
    mixed: list
    tower_tapes: list


class Backbone:
    """One extraction layer of shared plus task-specific experts, softmax gates and task towers.

    With ``kind="shared_bottom"`` a single shared expert feeds every tower and no
    gates are used.
    """

    def __init__(self, n_in: int, rng: np.random.Generator, kind: str = "ple_lite", n_tasks: int = 2,
                 expert_sizes: Sequence[int] = (64, 32), tower_sizes: Sequence[int] = (16,),
                 n_shared: int = 2, n_specific: int = 1):
        if kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {kind!r}")
        self.kind = kind
        self.n_in = n_in
        self.n_tasks = n_tasks
        width = expert_sizes[-1]
        if kind == "shared_bottom":
            n_shared, n_specific = 1, 0
        self.n_shared = n_shared
        self.n_specific = n_specific
        self.shared = [Mlp.build([n_in, *expert_sizes], rng, output="relu") for _ in range(n_shared)]
        self.specific = [[Mlp.build([n_in, *expert_sizes], rng, output="relu") for _ in range(n_specific)]
                         for _ in range(n_tasks)]
        self.gates = ([Mlp.build([n_in, n_shared + n_specific], rng) for _ in range(n_tasks)]
                      if kind == "ple_lite" else [])
        self.towers = [Mlp.build([width, *tower_sizes, 1], rng) for _ in range(n_tasks)]

    def widen_input(self, extra: int, rng: np.random.Generator) -> None:
        """Append ``extra`` input columns to every expert and gate.

        Existing weights are untouched, so with zeros in the new columns the
        forward pass is exactly that of the narrower backbone.
        """
        bound = 1.0 / np.sqrt(self.n_in + extra)
        firsts = [m.layers[0] for m in list(self.shared) + [m for g in self.specific for m in g] + list(self.gates)]
        for layer in firsts:
            cols = rng.uniform(-bound, bound, size=(layer.weight.shape[0], extra))
            layer.weight = np.concatenate([layer.weight, cols], axis=1)
        self.n_in += extra

    def modules(self) -> list[Mlp]:
        mods = list(self.shared)
        for group in self.specific:
            mods.extend(group)
        return mods + list(self.gates) + list(self.towers)

    def params(self) -> list[np.ndarray]:
        out = []
        for m in self.modules():
            out.extend(m.params())
        return out

    def _visible(self, t: int) -> list[int]:
        """Expert slots visible to task ``t``: shared experts, then its own."""
        own = [self.n_shared + t * self.n_specific + k for k in range(self.n_specific)]
        return list(range(self.n_shared)) + own

    def forward(self, x) -> tuple[np.ndarray, BackboneTape]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"backbone expects width {self.n_in}, got {x.shape}")
        experts = list(self.shared) + [m for group in self.specific for m in group]
        outs, tapes = [], []
        for m in experts:
            y, tp = m.forward(x)
            outs.append(y)
            tapes.append(tp)
        gate_tapes, gate_probs, mixed, tower_tapes = [], [], [], []
        logits = np.empty((len(x), self.n_tasks))
        for t in range(self.n_tasks):
            if self.kind == "ple_lite":
                a, gtp = self.gates[t].forward(x)
                g = softmax(a)
                vis = self._visible(t)
                h = np.einsum("nk,knd->nd", g, np.stack([outs[k] for k in vis]))
                gate_tapes.append(gtp)
                gate_probs.append(g)
            else:
                h = outs[0]
            mixed.append(h)
            z, ttp = self.towers[t].forward(h)
            tower_tapes.append(ttp)
            logits[:, t] = z[:, 0]
        return logits, BackboneTape(tapes, outs, gate_tapes, gate_probs, mixed, tower_tapes)

    def gate_distribution(self, x) -> list[np.ndarray]:
        return self.forward(np.atleast_2d(x))[1].gate_probs

    def backward(self, tape: BackboneTape, dlogits) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gradients of ``sum(logits * dlogits)``; parameter order matches :meth:`params`."""
        dlogits = np.asarray(dlogits, dtype=np.float64)
        n_exp = len(tape.expert_outs)
        d_out = [np.zeros_like(o) for o in tape.expert_outs]
        dx = np.zeros((dlogits.shape[0], self.n_in))
        gate_grads, tower_grads = [], []
        for t in range(self.n_tasks):
            dh, tg = self.towers[t].backward(tape.tower_tapes[t], dlogits[:, t:t + 1])
            tower_grads.append(tg)
            if self.kind == "ple_lite":
                g = tape.gate_probs[t]
                vis = self._visible(t)
                dg = np.stack([np.einsum("nd,nd->n", tape.expert_outs[k], dh) for k in vis], axis=1)
                for slot, k in enumerate(vis):
                    d_out[k] += g[:, slot:slot + 1] * dh
                da = g * (dg - (g * dg).sum(axis=1, keepdims=True))
                dxg, gg = self.gates[t].backward(tape.gate_tapes[t], da)
                dx += dxg
                gate_grads.append(gg)
            else:
                d_out[0] += dh
        expert_grads = []
        experts = list(self.shared) + [m for group in self.specific for m in group]
        for k in range(n_exp):
            dxe, eg = experts[k].backward(tape.expert_tapes[k], d_out[k])
            dx += dxe
            expert_grads.append(eg)
        grads: list[np.ndarray] = []
        for eg in expert_grads:
            grads.extend(eg)
        for gg in gate_grads:
            grads.extend(gg)
        for tg in tower_grads:
            grads.extend(tg)
        return dx, grads


def merge_score(logits, weights=None):
    """Weighted sum of task logits (all weights 1 by default)."""
    logits = np.asarray(logits, dtype=np.float64)
    n_tasks = logits.shape[-1]
    w = np.ones(n_tasks) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n_tasks,):
        raise DimensionError(f"{len(w)} merge weights for {n_tasks} tasks")
    out = logits @ w
    return float(out) if np.ndim(out) == 0 else out


def mtl_loss(logits, labels):
    """Per-sample sum of unweighted task BCE losses and the gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} differ")
    loss, grad = bce_loss(logits, labels)
    loss = np.asarray(loss)
    return loss.sum(axis=-1), np.asarray(grad)


def total_loss(l_mtl: float, l_aux: float, uie=(0.0, 0.0), upbe=(0.0, 0.0), uhse=(0.0, 0.0),
               w: ClusterLossWeights = ClusterLossWeights()) -> float:
    return (l_mtl + l_aux
            + w.rho * (uie[0] + uie[1])
            + w.lam * (upbe[0] + upbe[1])
            + w.eta * (uhse[0] + uhse[1]))
