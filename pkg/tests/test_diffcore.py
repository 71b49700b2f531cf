import math
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from tflimits import diffcore as dc


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def grad_of(fn, *arrays_):
    tape = dc.Tape()
    leaves = [tape.param(f"x{i}", a) for i, a in enumerate(arrays_)]
    g = dc.backward(tape, fn(*leaves))
    return [g[f"x{i}"] for i in range(len(arrays_))]


def fd_error(fn, *arrays_):
    params = {f"x{i}": a for i, a in enumerate(arrays_)}
    return dc.finite_diff_check(lambda tape, lv: fn(*[lv[f"x{i}"] for i in range(len(arrays_))]), params, 1e-5)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dc.matmul(dc.Tensor(np.eye(2)), dc.Tensor(a)).data, a)


def test_matmul_annihilation():
    out = dc.matmul(dc.Tensor([[1.0, 0.0], [0.0, 0.0]]), dc.Tensor([[0.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[0.0], [0.0]])


def test_matmul_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(dc.matmul(dc.Tensor(a), dc.Tensor(b)).data, naive_matmul(a, b), rtol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(dc.ShapeError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric_row():
    np.testing.assert_allclose(dc.softmax_rows(dc.Tensor([[0.0, 0.0], [1.0, 1.0]])).data[0], [0.5, 0.5])


def test_softmax_causal_first_row(rng):
    out = dc.softmax_rows(dc.Tensor(rng.standard_normal((3, 3))), causal=True).data
    np.testing.assert_array_equal(out[0], [1.0, 0.0, 0.0])


def test_softmax_log_values():
    row = np.log([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(dc.softmax_rows(dc.Tensor(row)).data[0], [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)


@given(arrays(np.float64, (4, 4), elements=st.floats(-30, 30)), st.booleans())
def test_softmax_rows_sum_to_one(a, causal):
    out = dc.softmax_rows(dc.Tensor(a), causal=causal).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    if causal:
        assert np.all(out[np.triu_indices(4, 1)] == 0.0)


def test_softmax_large_logits_stable():
    out = dc.softmax_rows(dc.Tensor([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5]])


# ---------------------------------------------------------------- layernorm

def test_layernorm_constant_is_zero():
    np.testing.assert_array_equal(dc.layernorm_fixed(dc.Tensor(np.full(5, 3.7)), 1e-6).data, np.zeros(5))


def test_layernorm_unit_fixed_point():
    np.testing.assert_allclose(dc.layernorm_fixed(dc.Tensor([1.0, -1.0]), 1e-14).data, [1.0, -1.0], atol=1e-12)


def test_layernorm_moments():
    out = dc.layernorm_fixed(dc.Tensor([0.0, 1.0, 2.0, 3.0]), 1e-6).data
    assert abs(out.mean()) < 1e-5
    assert abs(out.var() - 1.0) < 1e-5


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_layernorm_zero_mean(h):
    if np.ptp(h) < 1e-3:
        return
    assert abs(dc.layernorm_fixed(dc.Tensor(h)).data.mean()) < 1e-10


# ---------------------------------------------------------------- gelu

def test_gelu_values():
    assert dc.gelu(dc.Tensor([0.0])).data[0] == 0.0
    assert abs(dc.gelu(dc.Tensor([10.0])).data[0] - 10.0) < 1e-8
    assert abs(dc.gelu(dc.Tensor([1.0])).data[0] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert abs(dc.gelu(dc.Tensor([1.0])).data[0] - 0.8413447) < 1e-7


# ---------------------------------------------------------------- backward

def test_backward_square():
    (g,) = grad_of(lambda x: dc.sum_all(dc.mul(x, x)), np.array([3.0]))
    np.testing.assert_allclose(g, [6.0])


def test_layernorm_gradient_orthogonal_to_ones(rng):
    (g,) = grad_of(lambda h: dc.sum_all(dc.layernorm_fixed(h)), rng.standard_normal(7))
    assert abs(g.sum()) < 1e-10


def test_two_layer_composite(rng):
    def f(w1, w2):
        x = dc.constant(rng_x)
        return dc.sum_all(dc.gelu(dc.matmul(w2, dc.gelu(dc.matmul(w1, x)))))

    rng_x = rng.standard_normal((3, 2))
    assert fd_error(f, rng.standard_normal((4, 3)), rng.standard_normal((2, 4))) < 1e-5


def test_backward_linearity(rng):
    a = rng.standard_normal((3, 3))
    f1 = lambda x: dc.sum_all(dc.gelu(x))
    f2 = lambda x: dc.sum_all(dc.softmax_rows(dc.mul(x, x)))
    (g1,) = grad_of(f1, a)
    (g2,) = grad_of(f2, a)
    (g12,) = grad_of(lambda x: dc.add(f1(x), f2(x)), a)
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)


def test_backward_needs_scalar():
    tape = dc.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(dc.ContractError):
        dc.backward(tape, dc.mul(x, x))


def test_tape_is_consumed():
    tape = dc.Tape()
    x = tape.param("x", np.ones(2))
    loss = dc.sum_all(x)
    dc.backward(tape, loss)
    with pytest.raises(dc.ContractError):
        dc.backward(tape, loss)


def test_unused_leaf_gets_zero_grad():
    tape = dc.Tape()
    x = tape.param("x", np.ones(2))
    tape.param("y", np.ones(3))
    g = dc.backward(tape, dc.sum_all(x))
    np.testing.assert_array_equal(g["y"], np.zeros(3))


def test_tensor_is_read_only_and_leaves_caller_alone():
    a = np.ones(3)
    t = dc.Tensor(a)
    with pytest.raises(ValueError):
        t.data[0] = 2.0
    a[0] = 5.0
    assert a.flags.writeable


def test_take_rows_accumulates_duplicates():
    table = np.arange(6.0).reshape(3, 2)
    (g,) = grad_of(lambda t: dc.sum_all(dc.take_rows(t, np.array([[0, 0, 2]]))), table)
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_add_unbroadcasts(rng):
    (ga, gb) = grad_of(lambda a, b: dc.sum_all(dc.add(a, b)), rng.standard_normal((2, 3, 4)),
                       rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(gb, np.full((3, 4), 2.0))


# ---------------------------------------------------------------- finite differences

def test_fd_cubic():
    err = dc.finite_diff_check(lambda t, lv: dc.sum_all(dc.mul(lv["x"], dc.mul(lv["x"], lv["x"]))),
                               {"x": np.array([2.0])}, 1e-5)
    assert err < 1e-8


def test_fd_constant():
    err = dc.finite_diff_check(lambda t, lv: dc.sum_all(dc.scale(lv["x"], 0.0)), {"x": np.array([1.0, 2.0])})
    assert err == 0.0


PRIMITIVES = {
    "add": (lambda a, b: dc.sum_all(dc.mul(dc.add(a, b), dc.add(a, b))), [(3, 2), (3, 2)]),
    "sub": (lambda a, b: dc.sum_all(dc.mul(dc.sub(a, b), a)), [(3, 2), (3, 2)]),
    "mul": (lambda a, b: dc.sum_all(dc.mul(a, b)), [(2, 3), (2, 3)]),
    "scale": (lambda a: dc.sum_all(dc.mul(dc.scale(a, 1.7), a)), [(4,)]),
    "gelu": (lambda a: dc.sum_all(dc.gelu(a)), [(5,)]),
    "log": (lambda a: dc.sum_all(dc.log(dc.add(dc.mul(a, a), dc.constant(1.0)))), [(4,)]),
    "mean": (lambda a: dc.sum_all(dc.mul(dc.mean(a, 1), dc.mean(a, 1))), [(2, 3, 2)]),
    "reshape": (lambda a: dc.sum_all(dc.mul(dc.reshape(a, (3, 2)), dc.constant(np.arange(6.0).reshape(3, 2)))),
                [(2, 3)]),
    "transpose": (lambda a: dc.sum_all(dc.mul(dc.transpose(a, (1, 0)), dc.constant(np.arange(6.0).reshape(3, 2)))),
                  [(2, 3)]),
    "matmul": (lambda a, b: dc.sum_all(dc.gelu(dc.matmul(a, b))), [(3, 4), (4, 2)]),
    "einsum": (lambda a, b: dc.sum_all(dc.gelu(dc.einsum("bij,bjk->bik", a, b))), [(2, 2, 3), (2, 3, 2)]),
    "softmax": (lambda a: dc.sum_all(dc.mul(dc.softmax_rows(a), dc.constant(np.arange(9.0).reshape(3, 3)))),
                [(3, 3)]),
    "softmax_causal": (lambda a: dc.sum_all(dc.mul(dc.softmax_rows(a, True),
                                                   dc.constant(np.arange(9.0).reshape(3, 3)))), [(3, 3)]),
    "layernorm": (lambda a: dc.sum_all(dc.mul(dc.layernorm_fixed(a), dc.constant(np.arange(5.0)))), [(5,)]),
    "log_softmax": (lambda a: dc.sum_all(dc.mul(dc.log_softmax(a), dc.constant(np.arange(6.0).reshape(2, 3)))),
                    [(2, 3)]),
    "pick": (lambda a: dc.sum_all(dc.mul(dc.pick(a, np.array([2, 0])), dc.pick(a, np.array([1, 1])))), [(2, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_adjoints(name):
    fn, shapes = PRIMITIVES[name]
    r = np.random.default_rng(zlib.crc32(name.encode()))
    arrays_ = [r.uniform(-2, 2, s) for s in shapes]
    assert fd_error(fn, *arrays_) < 1e-5


@given(arrays(np.float64, (3,), elements=st.floats(-2, 2)), arrays(np.float64, (3,), elements=st.floats(-2, 2)))
def test_product_rule(a, b):
    ga, gb = grad_of(lambda x, y: dc.sum_all(dc.mul(x, y)), a, b)
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)


def test_layernorm_overflow_is_not_silent():
    out = dc.layernorm_fixed(dc.Tensor([1e200, -1e200, 0.0])).data
    assert not np.all(np.isfinite(out))
