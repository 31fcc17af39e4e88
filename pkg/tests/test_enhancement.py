import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import sig

from duia.ghca import MemoryNetwork
from duia.enhancement import (
    PersonalizedStore, bundle, make_gen_layer, uhse_enhance, uhse_pool, uhse_train_step, uie_backward,
    uie_enhance, uie_train_step, upbe_enhance, upbe_update,
)
from duia.numeric import DimensionError, Optimizer, finite_diff_grad, relative_error


def store_with(d, users, seed=0):
    s = PersonalizedStore(d)
    s.reserve(len(users) + 4)
    s.rows(users, create=True)
    rng = np.random.default_rng(seed)
    n = len(users)
    s.personal[:n] = rng.normal(size=(n, d))
    s.upbe1[:n] = rng.normal(size=(n, d))
    s.upbe2[:n] = rng.normal(size=(n, d))
    return s


def gens(d, seed=0, count=2):
    rng = np.random.default_rng(seed)
    return [make_gen_layer(d, rng) for _ in range(count)]


def manual_weighted(mu, v):
    return sig(float(mu @ v)) * mu


# store

def test_absent_user_reads_zero():
    s = store_with(3, [5, 9])
    assert not s.read("personal", [7]).any()
    assert all(not v.any() for v in s.record(7))
    assert np.array_equal(s.record(9)[0], s.personal[1])


def test_store_capacity_must_be_reserved():
    s = PersonalizedStore(2)
    with pytest.raises(RuntimeError):
        s.rows([1], create=True)


# UIE

def test_uie_gated_off_gives_zeros():
    net = MemoryNetwork(2, 2, 1)
    net.level1[:] = [[-1, 0], [-0.5, -0.5]]
    a, b, _ = uie_enhance(net, store_with(2, [0]), gens(2), [[1.0, 0.0]], [0])
    assert not a.any() and not b.any()


def test_uie_zero_gen_layer_gives_zeros():
    net = MemoryNetwork(3, 2, 2, np.random.default_rng(0))
    z = [make_gen_layer(3, None), make_gen_layer(3, None)]
    v = np.abs(np.random.default_rng(1).normal(size=(4, 3)))
    net.level1[:] = np.abs(net.level1)
    net.level2[:] = np.abs(net.level2)
    a, b, _ = uie_enhance(net, store_with(3, [0, 1, 2, 3]), z, v, [0, 1, 2, 3])
    assert not a.any() and not b.any()


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_uie_recomposition(seed):
    rng = np.random.default_rng(seed)
    d = 4
    net = MemoryNetwork(d, 3, 2, rng)
    s = store_with(d, [10, 11], seed)
    g = gens(d, seed)
    v = rng.normal(size=(3, d))
    users = [10, 11, 12]  # 12 is absent: zero personal vector
    a, b, _ = uie_enhance(net, s, g, v, users)
    for r in range(3):
        ret = net.retrieve(v[r])
        if ret is None:
            assert not a[r].any() and not b[r].any()
            continue
        personal = s.record(users[r])[0]
        for out, gen, mu in ((a, g[0], net.level1[ret.index1]), (b, g[1], net.level2[ret.index2])):
            x = np.concatenate([manual_weighted(mu, v[r]), personal])
            assert np.allclose(out[r], gen.predict(x[None])[0], rtol=0, atol=1e-12)


def test_uie_gradients_match_fd():
    """Ranking-path gradients reach the layers and personal vectors, checked by finite differences."""
    rng = np.random.default_rng(2)
    d = 3
    worst = 0.0
    for case in range(100):
        net = MemoryNetwork(d, 2, 2, rng)
        net.level1[:] = np.abs(net.level1)
        net.level2[:] = np.abs(net.level2)
        s = store_with(d, [0, 1], case)
        g = gens(d, case)
        v = np.abs(rng.normal(size=(2, d)))
        w1, w2 = rng.normal(size=(2, d)), rng.normal(size=(2, d))

        def loss():
            a, b, _ = uie_enhance(net, s, g, v, [0, 1])
            return float((a * w1).sum() + (b * w2).sum())

        _, _, tape = uie_enhance(net, s, g, v, [0, 1])
        g1, g2, rows, vals = uie_backward(g, tape, w1, w2, d)
        dense = np.zeros((2, d))
        np.add.at(dense, rows, vals)
        fd = finite_diff_grad(lambda p: _with(s.personal, 2, p, loss), s.personal[:2].ravel().copy())
        worst = max(worst, relative_error(dense.ravel(), fd))
        for gen, grads in ((g[0], g1), (g[1], g2)):
            for p, gp in zip(gen.params(), grads):
                fd = finite_diff_grad(lambda q, p=p: _with(p, None, q, loss), p.ravel().copy())
                worst = max(worst, relative_error(gp.ravel(), fd))
    assert worst <= 1e-4


def _with(arr, n, flat, fn):
    view = arr[:n] if n is not None else arr
    old = view.copy()
    view[...] = flat.reshape(view.shape)
    out = fn()
    view[...] = old
    return out


def test_uie_train_step_examples():
    net = MemoryNetwork(2, 1, 1)
    before = net.copy()
    upd = uie_train_step(net, [[1.0, 0.0]], False)
    assert not upd.loss1.any() and net.equals(before)
    net.level1[0] = net.level2[0] = [1.0, 0.0]
    upd = uie_train_step(net, [[1.0, 0.0]], True)
    assert upd.loss1[0] == 0.0 and upd.loss2[0] == 0.0
    net.level1[0] = net.level2[0] = [0.0, 0.0]
    upd = uie_train_step(net, [[1.0, 0.0]], True)
    assert upd.loss1[0] == 0.5 and np.array_equal(upd.grad1[0], [-1.0, 0.0])


# UPBE

def test_upbe_example():
    net = MemoryNetwork(2, 1, 1)
    net.level1[0] = net.level2[0] = [1.0, 0.0]
    s = PersonalizedStore(2)
    s.reserve(2)
    upd = upbe_update(net, s, [3], [[1.0, 0.2]], [[1.0, 0.0]], [1])
    assert upd.loss1[0] == 0.5 and upd.loss2[0] == 0.5
    assert np.array_equal(upd.grad1[0], [-1.0, 0.0]) and np.array_equal(upd.grad2[0], [-1.0, 0.0])
    assert upd.rows1.tolist() == [0]


def test_upbe_negative_labels_leave_store_identical():
    rng = np.random.default_rng(4)
    net = MemoryNetwork(3, 4, 2, rng)
    s = store_with(3, [0, 1, 2])
    before = [a.copy() for a in s.arrays()]
    opt = Optimizer("adam", 0.1)
    for _ in range(20):
        upd = upbe_update(net, s, rng.integers(3, size=8), rng.normal(size=(8, 3)), rng.normal(size=(8, 3)),
                          np.zeros(8, dtype=int))
        assert len(upd.rows1) == 0 and len(upd.rows2) == 0 and not upd.loss1.any()
        opt.begin()
        opt.update_rows(s.upbe1, upd.rows1, upd.grad1)
        opt.update_rows(s.upbe2, upd.rows2, upd.grad2)
    assert len(s) == 3
    assert all(np.array_equal(a, b) for a, b in zip(before, s.arrays()))


def test_upbe_anti_aligned_user_is_filtered():
    net = MemoryNetwork(2, 1, 1)
    net.level1[0] = net.level2[0] = [1.0, 0.0]
    s = PersonalizedStore(2)
    s.reserve(2)
    upd = upbe_update(net, s, [3], [[1.0, 0.0]], [[-1.0, 0.0]], [1])
    assert not upd.loss1.any() and len(upd.rows1) == 0 and len(s) == 0


def test_upbe_gradient_matches_fd_on_gate_frozen_loss():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 6))
        net = MemoryNetwork(d, 1, 1)
        net.level1[0] = net.level2[0] = rng.normal(size=d)
        mu = net.level1[0]
        s = PersonalizedStore(d)
        s.reserve(1)
        s.rows([0], create=True)
        s.upbe1[0] = rng.normal(size=d)
        p = s.upbe1[0].copy()
        upd = upbe_update(net, s, [0], [mu], [mu], [1])
        g = sig(float(mu @ p))
        fd = finite_diff_grad(lambda q: g * float((mu - q) @ (mu - q)), p)
        worst = max(worst, relative_error(upd.grad1[0], fd))
    assert worst <= 1e-4


def test_upbe_sgd_contraction():
    net = MemoryNetwork(2, 1, 1)
    net.level1[0] = net.level2[0] = [0.6, 0.8]
    s = PersonalizedStore(2)
    s.reserve(1)
    opt = Optimizer("sgd", 0.3)
    dist = None
    for _ in range(50):
        upd = upbe_update(net, s, [0], [[0.6, 0.8]], [[0.6, 0.8]], [1])
        opt.begin()
        opt.update_rows(s.upbe1, upd.rows1, upd.grad1)
        new = np.linalg.norm(s.upbe1[0] - net.level1[0])
        if dist is not None:
            if dist < 1e-12:
                break
            assert new < dist
        dist = new


def test_upbe_enhance_examples():
    d = 3
    s = store_with(d, [4])
    g = gens(d, 1)
    a, b, _ = upbe_enhance(s, g, [4, 99])
    assert not a[1].any() and not b[1].any()
    x = np.concatenate([s.upbe1[0], np.zeros(d)])
    assert np.array_equal(a[0], g[0].predict(x[None])[0])
    z = [make_gen_layer(d, None)] * 2
    a, b, _ = upbe_enhance(s, z, [4])
    assert not a.any() and not b.any()


# UHSE

def test_uhse_train_step_negative_leaves_net():
    net = MemoryNetwork(2, 2, 2, np.random.default_rng(0))
    before = net.copy()
    uhse_train_step(net, [[1.0, 0.0]], [0], True)
    uhse_train_step(net, [[1.0, 0.0]], [1], False)
    assert net.equals(before)


def test_uhse_pool_examples():
    net = MemoryNetwork(2, 1, 2)
    net.level1[0] = [1.0, 1.0]
    net.level2[:] = [[1.0, 0.0], [0.0, 1.0]]
    vecs = np.array([[1.0, 0.1], [0.1, 1.0], [2.0, 0.0]])
    pooled, has = uhse_pool(net, vecs, np.array([[0, 1, -1], [0, 2, -1], [-1, -1, -1]]))
    assert np.array_equal(pooled[0], [0.5, 0.5])
    assert np.array_equal(pooled[1], [1.0, 0.0])
    assert not pooled[2].any() and has.tolist() == [True, True, False]


@given(st.permutations(list(range(5))), st.integers(0, 1000))
def test_uhse_permutation_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    net = MemoryNetwork(3, 2, 2, rng)
    vecs = rng.normal(size=(5, 3))
    gen = make_gen_layer(3, rng)
    a, _ = uhse_enhance(net, gen, vecs, np.arange(5)[None])
    b, _ = uhse_enhance(net, gen, vecs, np.array(perm)[None])
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_uhse_enhance_recomposition():
    net = MemoryNetwork(2, 1, 2)
    net.level1[0] = [1.0, 1.0]
    net.level2[:] = [[1.0, 0.0], [0.0, 1.0]]
    gen = make_gen_layer(2, np.random.default_rng(3))
    out, _ = uhse_enhance(net, gen, [[1.0, 0.1], [0.1, 1.0]], [[0, 1]])
    assert np.array_equal(out[0], gen.predict(np.array([[0.5, 0.5, 0.0, 0.0]]))[0])
    empty, _ = uhse_enhance(net, gen, np.zeros((0, 2)), [[-1, -1]])
    assert not empty.any()


# bundle

def test_bundle_order_and_errors():
    parts = [np.full(2, k, dtype=float) for k in range(5)]
    assert bundle(*parts).tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]
    assert not bundle(*[np.zeros(3)] * 5).any()
    with pytest.raises(DimensionError):
        bundle(np.zeros(2), np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2))


def test_upbe_enhance_skips_never_pulled_vectors():
    s = store_with(2, [1, 2])
    s.upbe1[0] = 0.0
    a, b, _ = upbe_enhance(s, gens(2, 4), [1, 2])
    assert not a[0].any() and a[1].any() and b[0].any()
