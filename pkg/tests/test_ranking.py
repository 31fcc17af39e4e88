import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duia.ghca import ClusterLossWeights
from duia.numeric import Dense, DimensionError, Mlp, finite_diff_grad, relative_error
from duia.ranking import Backbone, merge_score, mtl_loss, softmax, total_loss


def backbone(kind="ple_lite", n_in=6, seed=0):
    return Backbone(n_in, np.random.default_rng(seed), kind, 2, (5, 4), (3,))


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_gates_are_a_simplex(seed):
    rng = np.random.default_rng(seed)
    b = backbone(seed=seed)
    for g in b.gate_distribution(5 * rng.normal(size=(7, 6))):
        assert np.all(g >= 0) and np.allclose(g.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_softmax_stable_for_large_inputs():
    p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(p, [[0.5, 0.5, 0.0]])


def test_degenerate_shared_bottom_is_linear_read():
    b = Backbone(2, np.random.default_rng(0), "shared_bottom", 1, (2,), (2,))
    b.shared[0] = Mlp([Dense(np.eye(2), np.zeros(2), "linear")])
    b.towers[0] = Mlp([Dense(np.eye(2), np.zeros(2), "linear"), Dense(np.array([[2.0, -1.0]]), np.array([0.5]))])
    x = np.array([[1.0, 3.0], [-2.0, 0.5]])
    logits, _ = b.forward(x)
    assert np.allclose(logits[:, 0], x @ [2.0, -1.0] + 0.5, rtol=0, atol=1e-15)


def test_widened_input_with_zero_columns_matches_narrow_backbone():
    rng = np.random.default_rng(3)
    narrow = backbone(n_in=6, seed=4)
    wide = backbone(n_in=6, seed=4)
    wide.widen_input(5, np.random.default_rng(9))
    x = rng.normal(size=(10, 6))
    a, _ = narrow.forward(x)
    b, _ = wide.forward(np.concatenate([x, np.zeros((10, 5))], axis=1))
    assert np.max(np.abs(a - b)) <= 1e-12


def test_forward_dimension_error():
    with pytest.raises(DimensionError):
        backbone().forward(np.ones((2, 7)))


@pytest.mark.parametrize("kind", ["ple_lite", "shared_bottom"])
def test_backbone_gradients_match_fd(kind):
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(10):
        b = backbone(kind, seed=trial)
        x = rng.normal(size=(3, 6))
        dl = rng.normal(size=(3, 2))
        logits, tape = b.forward(x)
        dx, grads = b.backward(tape, dl)
        fx = finite_diff_grad(lambda z: float((b.forward(z)[0] * dl).sum()), x)
        worst = max(worst, relative_error(dx, fx))
        for p, g in zip(b.params(), grads):
            def f(flat, p=p):
                old = p.copy()
                p[...] = flat.reshape(p.shape)
                out = float((b.forward(x)[0] * dl).sum())
                p[...] = old
                return out
            worst = max(worst, relative_error(g.ravel(), finite_diff_grad(f, p.ravel().copy())))
    assert worst <= 1e-4


def test_merge_score_examples():
    assert merge_score(np.array([0.0, 0.0])) == 0.0
    assert merge_score(np.array([1.0, 2.0]), [1, 1]) == 3.0
    assert merge_score(np.array([1.0, -1.0]), [0.7, 0.3]) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(DimensionError):
        merge_score(np.array([1.0, 2.0]), [1.0])


def test_mtl_loss_examples():
    loss, _ = mtl_loss(np.array([[0.0, 0.0]]), np.array([[1, 0]]))
    assert loss[0] == pytest.approx(2 * math.log(2), rel=1e-12)
    loss, _ = mtl_loss(np.array([[50.0, -50.0]]), np.array([[1, 0]]))
    assert loss[0] < 1e-20


def test_mtl_loss_gradient_fd():
    rng = np.random.default_rng(6)
    for _ in range(100):
        z = rng.normal(size=(1, 2)) * 3
        y = rng.integers(2, size=(1, 2))
        _, g = mtl_loss(z, y)
        fd = finite_diff_grad(lambda q: float(mtl_loss(q, y)[0].sum()), z)
        assert relative_error(g, fd) <= 1e-4


def test_total_loss_examples():
    w = ClusterLossWeights(0.05, 0.05, 0.05)
    assert total_loss(1.0, 1.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), w) == pytest.approx(2.30, abs=1e-12)
    assert total_loss(0.7, 0.0, w=w) == 0.7
    zero = ClusterLossWeights(0.0, 0.0, 0.0)
    assert total_loss(1.0, 1.0, (5.0, 3.0), (2.0, 9.0), (4.0, 1.0), zero) == 2.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1), st.sampled_from([0, 1, 2]))
def test_total_loss_linear_in_cluster_terms(base, delta, weight, which):
    w = ClusterLossWeights(*[weight if k == which else 0.05 for k in range(3)])
    terms = [(1.0, 1.0)] * 3
    bumped = list(terms)
    bumped[which] = (1.0 + delta, 1.0)
    a = total_loss(base, 0.5, *terms, w=w)
    b = total_loss(base, 0.5, *bumped, w=w)
    assert b - a == pytest.approx(weight * delta, abs=1e-9)
