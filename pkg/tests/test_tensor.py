import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from puedgeformer import tensor as T
from puedgeformer.tensor import ShapeError, Tape, TapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grads(f, *tensors):
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [t.grad for t in tensors]


def triple_loop(a, b):
    m, p = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = a[i, 0] * b[0, j]
            for q in range(1, p):
                s = s + a[i, q] * b[q, j]
            out[i, j] = s
    return out


# -- matmul ---------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]])).data, [[5.0], [7.0]])


@pytest.mark.parametrize("seed", range(5))
def test_ordered_matmul_matches_triple_loop_bitwise(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    with T.ordered_matmul():
        got = T.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(got, triple_loop(a, b))


def test_default_matmul_close_to_triple_loop():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal((7, 9)), rng.standard_normal((9, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), rtol=0, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_backward_rule():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    ga, gb = grads(lambda: T.sum(T.matmul(a, b) * g), a, b)
    np.testing.assert_allclose(ga, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(gb, a.data.T @ g, atol=1e-14)


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x - 3.0) / np.exp(x - 3.0).sum()
    np.testing.assert_allclose(T.softmax_rows(Tensor([x])).data[0], expected, rtol=1e-15)


def test_softmax_large_values_do_not_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert np.array_equal(out, [[0.5, 0.5]])


@settings(max_examples=200, deadline=None)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
        elements=st.floats(-1e300, 1e300, allow_nan=False),
    )
)
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_rows(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


# -- activations and max -------------------------------------------------------


def test_leaky_relu_values():
    assert np.array_equal(T.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.2).data, [-0.2, 0.0, 2.0])
    x = np.array([0.0, 1.5, 3.0])
    assert np.array_equal(T.leaky_relu(Tensor(x), 0.2).data, x)


def test_leaky_relu_gradient_at_negative_one_is_slope():
    x = leaf([-1.0])
    (g,) = grads(lambda: T.sum(T.leaky_relu(x, 0.2)), x)
    h = 1e-6
    numeric = (0.2 * (-1 + h) - 0.2 * (-1 - h)) / (2 * h)
    assert g[0] == pytest.approx(0.2, abs=1e-15)
    assert numeric == pytest.approx(0.2, rel=1e-8)


def test_relu_values_and_gradient():
    x = leaf([-2.0, 3.0])
    assert np.array_equal(T.relu(x).data, [0.0, 3.0])
    (g,) = grads(lambda: T.sum(T.relu(x)), x)
    assert np.array_equal(g, [0.0, 1.0])


def test_max_over_axis_value_index_and_ties():
    v, i = T.max_over_axis(Tensor([[1.0, 5.0, 3.0]]), axis=1)
    assert v.data.tolist() == [5.0] and i.tolist() == [1]
    v, i = T.max_over_axis(Tensor([[2.0, 2.0, 2.0]]), axis=-1)
    assert v.data.tolist() == [2.0] and i.tolist() == [0]


def test_max_over_axis_gradient_routes_to_argmax():
    x = leaf([[1.0, 5.0, 3.0]])
    (g,) = grads(lambda: T.sum(T.max_over_axis(x, 1)[0]), x)
    assert np.array_equal(g, [[0.0, 1.0, 0.0]])
    # finite differences on each entry agree
    for j, expect in enumerate([0.0, 1.0, 0.0]):
        d = np.zeros((1, 3))
        d[0, j] = 1e-6
        num = (np.max(x.data + d) - np.max(x.data - d)) / 2e-6
        assert num == pytest.approx(expect, abs=1e-9)


def test_max_over_axis_bad_axis():
    with pytest.raises(np.exceptions.AxisError):
        T.max_over_axis(Tensor(np.ones((2, 3))), axis=2)


# -- concat / reshape / gather ----------------------------------------------------------


def test_concat_single_and_blocks():
    a = np.arange(6.0).reshape(3, 2)
    b = np.arange(9.0).reshape(3, 3) + 10
    assert np.array_equal(T.concat([Tensor(a)], axis=1).data, a)
    out = T.concat([Tensor(a), Tensor(b)], axis=1).data
    assert out.shape == (3, 5)
    assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)


def test_concat_backward_splits_by_offsets():
    a, b = leaf(np.ones((3, 2))), leaf(np.ones((3, 3)))
    ga, gb = grads(lambda: T.sum(T.concat([a, b], axis=1)), a, b)
    assert np.array_equal(ga, np.ones((3, 2))) and np.array_equal(gb, np.ones((3, 3)))


def test_concat_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2)))], axis=1)


def test_reshape_order_and_round_trip():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    assert T.reshape(x, (4, 1)).data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    rng = np.random.default_rng(3)
    y = Tensor(rng.standard_normal((5, 6)))
    back = T.reshape(T.reshape(y, (3, 10)), (5, 6))
    assert np.array_equal(back.data, y.data)
    with pytest.raises(ShapeError):
        T.reshape(y, (7, 4))


def test_reshape_row_major_matches_shuffle_enumeration():
    # N=2, C=4 -> 8x1: entry (i, c) lands at row i*4 + c
    f = np.array([[10.0, 11.0, 12.0, 13.0], [20.0, 21.0, 22.0, 23.0]])
    out = T.reshape(Tensor(f), (8, 1)).data[:, 0]
    for i in range(2):
        for c in range(4):
            assert out[i * 4 + c] == f[i, c]


def test_gather_rows_identity_and_cycle():
    a = np.arange(6.0).reshape(3, 2)
    idx = np.repeat(np.arange(3)[:, None], 4, axis=1)
    out = T.gather_rows(Tensor(a), idx).data
    assert out.shape == (3, 4, 2)
    assert all(np.array_equal(out[i, j], a[i]) for i in range(3) for j in range(4))
    cyc = T.gather_rows(Tensor(a), np.array([[1], [2], [0]])).data[:, 0]
    assert np.array_equal(cyc, a[[1, 2, 0]])


def test_gather_rows_backward_matches_scatter_loop():
    rng = np.random.default_rng(5)
    a = leaf(rng.standard_normal((4, 3)))
    idx = rng.integers(0, 4, size=(6, 5))
    w = rng.standard_normal((6, 5, 3))
    (g,) = grads(lambda: T.sum(T.gather_rows(a, idx) * w), a)
    oracle = np.zeros((4, 3))
    for i in range(6):
        for j in range(5):
            oracle[idx[i, j]] += w[i, j]
    np.testing.assert_allclose(g, oracle, rtol=0, atol=1e-14)


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.ones((3, 2))), np.array([[0], [3]]))


# -- tape ----------------------------------------------------------------------


def test_backward_sum_gives_ones_and_square_gives_2x():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal((3, 4)))
    (g,) = grads(lambda: T.sum(x), x)
    assert np.array_equal(g, np.ones((3, 4)))
    x.zero_grad()
    (g,) = grads(lambda: T.sum(x * x), x)
    np.testing.assert_allclose(g, 2 * x.data, rtol=1e-15)


def test_broadcast_add_gradient_reduces():
    a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
    _, gb = grads(lambda: T.sum(a + b), a, b)
    assert np.array_equal(gb, np.full(4, 3.0))


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * x
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(y)
    with Tape() as tape:
        loss = T.sum(x * x)
    tape.backward(loss)
    with pytest.raises(TapeError, match="already ran"):
        tape.backward(loss)
    with pytest.raises(TapeError):
        with tape:
            pass
    tape.reset()
    with Tape() as other:
        stale = T.sum(x * 3.0)
    with pytest.raises(TapeError, match="stale"):
        tape.backward(stale)
    del other


def test_module_level_backward_and_missing_tape():
    x = leaf([3.0])
    with Tape():
        loss = T.sum(x * x)
    T.backward(loss)
    assert x.grad.tolist() == [6.0]
    with pytest.raises(TapeError):
        T.backward(T.sum(Tensor([1.0])))


def test_no_recording_outside_tape():
    x = leaf([1.0, 2.0])
    y = T.sum(x * x)
    assert y._tape is None and not T.is_recording()


def test_every_reachable_leaf_gets_a_gradient():
    rng = np.random.default_rng(2)
    a, b, c = (leaf(rng.standard_normal((2, 2))) for _ in range(3))
    ga, gb, gc = grads(lambda: T.sum(T.relu(a @ b) + c * 0.0), a, b, c)
    assert ga is not None and gb is not None and np.array_equal(gc, np.zeros((2, 2)))


# -- grad_check -------------------------------------------------------------------


def test_grad_check_on_square():
    assert T.grad_check(lambda x: T.sum(x * x), leaf([1.0, 2.0])) < 1e-8


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda x: T.sum(x), leaf([1.0]), h=0.0)


def test_grad_check_detects_wrong_rule():
    def bad_square(a):
        return T.custom_op(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

    assert T.grad_check(lambda x: T.sum(bad_square(x)), leaf([1.0, 2.0])) > 0.1


def _composite(rng, n, c):
    a = leaf(rng.standard_normal((n, c)))
    w = leaf(rng.standard_normal((c, c)))
    probe = rng.standard_normal((n, c))
    idx = rng.integers(0, n, size=(n, 3))

    def f():
        h = T.leaky_relu(a @ w, 0.2)
        s = T.softmax_rows(h)
        g = T.gather_rows(s, idx)
        m, _ = T.max_over_axis(g, 1)
        cat = T.concat([m, T.relu(h)], axis=1)
        r = T.reshape(T.transpose(cat), (n, 2 * c))
        return T.sum(T.mean(r * np.concatenate([probe, probe], axis=1), axis=0))

    return f, {"a": a, "w": w}


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_composite_ops_random_instances(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        n, c = rng.integers(2, 9), rng.integers(2, 9)
        f, tensors = _composite(rng, n, c)
        with T.track_kinks() as kinks:
            f()
        if min(kinks) > 1e-4:
            break
    errors = T.grad_check_many(f, tensors, h=1e-6)
    assert max(errors.values()) < 1e-4, errors
