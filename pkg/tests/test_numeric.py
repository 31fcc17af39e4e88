import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duia.numeric import (
    Dense, DimensionError, Mlp, Optimizer, bce_loss, dot, finite_diff_grad, optimizer_apply, relative_error,
    sigmoid,
)


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)
    v = sigmoid(-1000.0)
    assert np.isfinite(v) and 0.0 <= v <= 1e-300


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12


def test_dot_examples():
    assert dot([1, 0], [1, 0]) == 1.0
    assert dot([1, 0], [0, 1]) == 0.0
    assert dot([0.5, -2], [4, 0.25]) == 1.5


def test_dot_length_mismatch_names_lengths():
    with pytest.raises(DimensionError, match="2.*3|3.*2"):
        dot([1, 2], [1, 2, 3])


def test_identity_linear_layer():
    m = Mlp([Dense(np.eye(2), np.zeros(2))])
    y, _ = m.forward(np.array([1.0, 2.0]))
    assert np.array_equal(y, [1.0, 2.0])


def test_relu_clips():
    m = Mlp([Dense(np.array([[-1.0]]), np.zeros(1), "relu")])
    assert np.array_equal(m.forward(np.array([3.0]))[0], [0.0])


def test_forward_dimension_mismatch():
    m = Mlp.build([3, 2], np.random.default_rng(0))
    with pytest.raises(DimensionError):
        m.forward(np.ones(4))


def test_chain_validation():
    with pytest.raises(DimensionError):
        Mlp([Dense(np.ones((2, 3)), np.zeros(2)), Dense(np.ones((1, 4)), np.zeros(1))])


def test_linear_backward_is_adjoint():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    m = Mlp([Dense(w, np.zeros(3))])
    _, tape = m.forward(rng.normal(size=4))
    dy = rng.normal(size=3)
    dx, _ = m.backward(tape, dy)
    assert np.array_equal(dx, w.T @ dy)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    m = Mlp.build([4, 5, 3], rng)
    _, tape = m.forward(rng.normal(size=4))
    dx, grads = m.backward(tape, np.zeros(3))
    assert not dx.any() and not any(g.any() for g in grads)


def test_foreign_tape_rejected():
    rng = np.random.default_rng(3)
    a, b = Mlp.build([2, 2], rng), Mlp.build([2, 2], rng)
    _, tape = a.forward(np.ones(2))
    with pytest.raises(ValueError):
        b.backward(tape, np.ones(2))


@pytest.mark.parametrize("activation", ["relu", "sigmoid", "linear"])
def test_mlp_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = Mlp.build([5, 7, 3], rng, hidden=activation)
        x = rng.normal(size=5)
        dy = rng.normal(size=3)
        _, tape = m.forward(x)
        dx, grads = m.backward(tape, dy)
        fd = finite_diff_grad(lambda z: float(m.forward(z)[0] @ dy), x)
        assert relative_error(dx, fd) <= 1e-4
        w = m.layers[0].weight

        def f(flat):
            old = w.copy()
            w[...] = flat.reshape(w.shape)
            out = float(m.forward(x)[0] @ dy)
            w[...] = old
            return out

        assert relative_error(grads[0].ravel(), finite_diff_grad(f, w.ravel().copy())) <= 1e-4


def test_parameter_count():
    m = Mlp.build([4, 3, 2], np.random.default_rng(0))
    assert m.parameter_count == 4 * 3 + 3 + 3 * 2 + 2


def test_init_bounds():
    m = Mlp.build([16, 8], np.random.default_rng(0))
    assert np.abs(m.layers[0].weight).max() <= 0.25


def test_sgd_example():
    p = np.array([1.0])
    optimizer_apply(Optimizer("sgd", 0.1), [p], [np.array([2.0])])
    assert p[0] == pytest.approx(0.8, abs=1e-15)


def test_adam_first_step_closed_form():
    p = np.array([0.0])
    optimizer_apply(Optimizer("adam", 0.001), [p], [np.array([1.0])])
    # m_hat = 1, v_hat = 1 after bias correction
    assert p[0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-12)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_is_identity(kind):
    rng = np.random.default_rng(5)
    p = rng.normal(size=(3, 4))
    before = p.copy()
    opt = Optimizer(kind, 0.01)
    for _ in range(3):
        optimizer_apply(opt, [p], [np.zeros_like(p)])
    assert np.array_equal(p, before)


def test_optimizer_shape_mismatch():
    with pytest.raises(DimensionError):
        optimizer_apply(Optimizer("sgd", 0.1), [np.zeros(3)], [np.zeros(4)])


def test_step_counter_increases():
    opt = Optimizer("adam", 0.01)
    p = np.zeros(2)
    for k in range(1, 4):
        optimizer_apply(opt, [p], [np.ones(2)])
        assert opt.t == k


def test_row_updates_touch_only_listed_rows():
    rng = np.random.default_rng(6)
    table = rng.normal(size=(10, 3))
    before = table.copy()
    opt = Optimizer("adam", 0.01)
    opt.begin()
    opt.update_rows(table, np.array([2, 7, 2]), rng.normal(size=(3, 3)))
    changed = np.flatnonzero((table != before).any(axis=1))
    assert changed.tolist() == [2, 7]


def test_row_update_matches_dense_sgd():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 2))
    b = a.copy()
    rows, g = np.array([1, 3, 1]), rng.normal(size=(3, 2))
    opt = Optimizer("sgd", 0.1)
    opt.begin()
    opt.update_rows(a, rows, g)
    dense = np.zeros_like(b)
    np.add.at(dense, rows, g)
    b -= 0.1 * dense
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_bce_examples():
    loss, _ = bce_loss(0.0, 1, 1.5)
    assert loss == pytest.approx(1.5 * math.log(2.0), rel=1e-12)
    loss, _ = bce_loss(40.0, 1, 1.0)
    assert loss < 1e-15


@given(st.floats(-20, 20), st.floats(0, 5), st.floats(0, 5))
def test_bce_negative_ignores_weight(logit, w1, w2):
    assert bce_loss(logit, 0, w1) == bce_loss(logit, 0, w2)


@settings(max_examples=200)
@given(st.floats(-30, 30), st.sampled_from([0, 1]), st.floats(0.01, 3))
def test_bce_non_negative_and_gradient(logit, y, w):
    loss, grad = bce_loss(logit, y, w)
    assert loss >= 0.0
    fd = (bce_loss(logit + 1e-6, y, w)[0] - bce_loss(logit - 1e-6, y, w)[0]) / 2e-6
    assert abs(fd - grad) <= 1e-5 * max(1.0, abs(grad))


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))[0] == pytest.approx(6.0, abs=1e-8)
    assert not finite_diff_grad(lambda x: 4.0, np.ones(3)).any()


def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda x: float("nan"), np.ones(2))
