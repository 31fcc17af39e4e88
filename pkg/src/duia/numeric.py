"""Dense numeric kernel: activations, MLPs with analytic backward, losses, optimizers.

Every routine works on float64 numpy arrays. MLP forward/backward accept a single
vector of shape ``(in,)`` or a batch of row vectors ``(n, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

ACTIVATIONS = ("relu", "sigmoid", "linear")


class DimensionError(ValueError):
    """Raised when array shapes do not chain."""


def sigmoid(x):
    """Logistic function; saturates to exactly 0 or 1 without overflow warnings."""
    out = expit(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def dot(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"dot of vectors with lengths {u.shape[-1] if u.ndim else 0} and {v.shape[-1] if v.ndim else 0}")
    return float(np.dot(u, v))


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot products of two ``(n, d)`` arrays."""
    return np.einsum("ij,ij->i", a, b)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return expit(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"weight {self.weight.shape} incompatible with bias {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Tape:
    """Activation cache of one forward pass; only valid for the network that made it."""

    owner: int
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    squeeze: bool = False


class Mlp:
    """Stack of dense layers.

    Parameters are exposed in a flat list ``[W0, b0, W1, b1, ...]`` so optimizers
    can update them in place.
    """

    def __init__(self, layers: Sequence[Dense]):
        layers = list(layers)
        if not layers:
            raise DimensionError("an Mlp needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].n_in != layers[k - 1].n_out:
                raise DimensionError(
                    f"layer {k} expects {layers[k].n_in} inputs but layer {k - 1} emits {layers[k - 1].n_out}"
                )
        self.layers = layers

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, hidden: str = "relu", output: str = "linear") -> "Mlp":
        """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
        if len(sizes) < 2:
            raise DimensionError("sizes must list at least input and output width")
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = rng.uniform(-bound, bound, size=n_out)
            act = output if k == len(sizes) - 2 else hidden
            layers.append(Dense(w, b, act))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes: Sequence[int], hidden: str = "relu", output: str = "linear") -> "Mlp":
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if k == len(sizes) - 2 else hidden
            layers.append(Dense(np.zeros((n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise DimensionError(f"input width {x.shape[-1] if x.ndim else 0} does not match first layer width {self.n_in}")
        tape = Tape(owner=id(self), squeeze=squeeze)
        for layer in self.layers:
            tape.inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            h = _activate(z, layer.activation)
            tape.preacts.append(z)
            tape.outputs.append(h)
        return (h[0] if squeeze else h), tape

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, dy) -> tuple[np.ndarray, list[np.ndarray]]:
        """Reverse pass for ``sum(y * dy)``; gradients are summed over the batch."""
        if tape.owner != id(self) or len(tape.inputs) != len(self.layers):
            raise ValueError("tape was not produced by this network")
        dy = np.asarray(dy, dtype=np.float64)
        g = dy[None, :] if tape.squeeze and dy.ndim == 1 else dy
        if g.shape != tape.outputs[-1].shape:
            raise DimensionError(f"upstream gradient {dy.shape} does not match output {tape.outputs[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = g * _activation_grad(tape.preacts[k], tape.outputs[k], layer.activation)
            grads[2 * k] = dz.T @ tape.inputs[k]
            grads[2 * k + 1] = dz.sum(axis=0)
            g = dz @ layer.weight
        return (g[0] if tape.squeeze else g), grads


def bce_loss(logit, y, w_pos=1.0):
    """Weighted binary cross-entropy from logits.

    loss = -[w_pos * y * log p + (1 - y) * log(1 - p)] with p = sigmoid(logit).
    Returns ``(loss, dloss/dlogit)`` elementwise.
    """
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w_pos, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("positive-sample weight must be non-negative")
    loss = -(w * y * log_expit(z) + (1.0 - y) * log_expit(-z))
    p = expit(z)
    grad = w * y * (p - 1.0) + (1.0 - y) * p
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


class Optimizer:
    """Adam or SGD over dense arrays and row-sparse tables.

    Dense parameters are registered once and updated in place by :meth:`step`.
    Row-sparse parameters (embedding tables, per-user stores) only touch the rows
    that received a gradient, so untouched rows stay bit-identical.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, kind: str = "adam", lr: float = 1e-3):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.kind = kind
        self.lr = float(lr)
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def _moments(self, p: np.ndarray):
        key = id(p)
        if key not in self._m or self._m[key].shape != p.shape:
            self._m[key] = np.zeros_like(p)
            self._v[key] = np.zeros_like(p)
        return self._m[key], self._v[key]

    def begin(self) -> None:
        """Advance the shared step counter; call once per optimizer step."""
        self.t += 1

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], scale: float = 1.0,
               lr: Optional[float] = None) -> None:
        """Dense update; ``lr`` overrides the default rate for this parameter group."""
        if len(params) != len(grads):
            raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise DimensionError(f"parameter {p.shape} and gradient {np.shape(g)} differ")
            self._apply(p, np.asarray(g, dtype=np.float64) * scale, None, self.lr if lr is None else lr)

    def update_rows(self, table: np.ndarray, rows: np.ndarray, row_grads: np.ndarray, scale: float = 1.0,
                    lr: Optional[float] = None) -> None:
        """Sparse update; duplicate rows are summed first."""
        if len(rows) == 0:
            return
        if row_grads.shape != (len(rows), table.shape[1]):
            raise DimensionError(f"row gradients {row_grads.shape} for {len(rows)} rows of width {table.shape[1]}")
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), table.shape[1]))
        np.add.at(acc, inv, row_grads)
        self._apply(table, acc * scale, uniq, self.lr if lr is None else lr)

    def _apply(self, p: np.ndarray, g: np.ndarray, rows, lr: float) -> None:
        if self.t == 0:
            raise RuntimeError("call begin() before applying updates")
        if self.kind == "sgd":
            if rows is None:
                p -= lr * g
            else:
                p[rows] -= lr * g
            return
        m, v = self._moments(p)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        if rows is None:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        else:
            mr = b1 * m[rows] + (1.0 - b1) * g
            vr = b2 * v[rows] + (1.0 - b2) * g * g
            m[rows] = mr
            v[rows] = vr
            p[rows] -= lr * (mr / c1) / (np.sqrt(vr / c2) + self.eps)

    def forget(self, p: np.ndarray) -> None:
        self._m.pop(id(p), None)
        self._v.pop(id(p), None)


def optimizer_apply(state: Optimizer, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """One optimizer step on ``params`` (updated in place and returned)."""
    state.begin()
    state.update(params, grads)
    return list(params)
