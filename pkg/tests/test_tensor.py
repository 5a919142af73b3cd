import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from ragl import tensor as T


def loops_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


dims = st.integers(1, 5)


@given(dims, dims, dims, st.integers(0, 10_000))
def test_matmul_matches_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
    out = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(out, loops_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_batched_matmul_fast_path_matches_einsum(rng):
    a = T.parameter(rng.standard_normal((3, 4, 5)))
    w = T.parameter(rng.standard_normal((5, 2)))
    out = T.matmul(a, w)
    np.testing.assert_allclose(out.data, np.einsum("bnk,km->bnm", a.data, w.data), atol=1e-12)
    upstream = rng.standard_normal(out.shape)
    out.backward(upstream)
    np.testing.assert_allclose(w.grad, np.einsum("bnk,bnm->km", a.data, upstream), atol=1e-12)
    np.testing.assert_allclose(a.grad, upstream @ w.data.T, atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(T.DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))


def test_softmax_rows_known_values():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0], [np.log(3.0), 0.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.75, 0.25]], atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(n, k, seed):
    x = np.random.default_rng(seed).standard_normal((n, k)) * 30
    out = T.softmax_rows(T.Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_relu_forward_and_subgradient_at_zero():
    x = T.parameter([-1.0, 0.0, 2.0])
    y = T.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    T.sum_all(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_l2_normalize_rows_unit_norm_and_zero_row():
    x = T.Tensor([[3.0, 4.0], [0.0, 0.0]])
    out = T.l2_normalize_rows(x, 1e-12).data
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(out[1], [0.0, 0.0])


PRIMITIVES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "softmax": lambda a, b: T.mul(T.softmax_rows(a), b),
    "l2norm": lambda a, b: T.mul(T.l2_normalize_rows(a), b),
    "relu": lambda a, b: T.mul(T.relu(a), b),
    "abs": lambda a, b: T.mul(T.absolute(a), b),
    "concat": lambda a, b: T.concat([a, b], axis=-1),
    "reshape": lambda a, b: T.mul(T.reshape(a, (3, 4)), T.reshape(b, (3, 4))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    a = T.parameter(rng.standard_normal((4, 3)) + 0.3)
    b = T.parameter(rng.standard_normal((4, 3)))
    weights = rng.standard_normal(PRIMITIVES[name](a, b).shape)

    def loss():
        return T.sum_all(T.mul(PRIMITIVES[name](a, b), weights))

    out = loss()
    out.backward()
    for p in (a, b):
        numeric = fd_grad(lambda: float(loss().data), p.data)
        np.testing.assert_allclose(p.grad, numeric, rtol=1e-6, atol=1e-7)


def test_broadcast_add_reduces_gradient():
    a = T.parameter(np.ones((2, 3)))
    b = T.parameter(np.ones(3))
    T.sum_all(T.add(a, b)).backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_take_rows_scatter_adds_duplicates():
    table = T.parameter(np.arange(6.0).reshape(3, 2))
    out = T.take_rows(table, np.array([0, 0, 2]))
    np.testing.assert_array_equal(out.data, [[0, 1], [0, 1], [4, 5]])
    T.sum_all(out).backward()
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        T.take_rows(T.parameter(np.ones((3, 2))), np.array([3]))


def test_sparse_matmul_gradient(rng):
    a = sp.random(5, 5, density=0.4, random_state=3, format="csr")
    h = T.parameter(rng.standard_normal((5, 2)))
    out = T.sparse_matmul(a, h)
    np.testing.assert_allclose(out.data, a.toarray() @ h.data, atol=1e-12)
    w = rng.standard_normal(out.shape)
    T.sum_all(T.mul(out, w)).backward()
    np.testing.assert_allclose(h.grad, a.toarray().T @ w, atol=1e-12)


def test_fused_eco_gradient_matches_finite_differences(rng):
    e = T.parameter(np.abs(rng.standard_normal((5, 3))))
    h = T.parameter(rng.standard_normal((2, 5, 4)))
    w = rng.standard_normal((2, 5, 4))

    def loss():
        return T.sum_all(T.mul(T.eco_aggregate(e, h), w))

    loss().backward()
    for p in (e, h):
        numeric = fd_grad(lambda: float(loss().data), p.data)
        np.testing.assert_allclose(p.grad, numeric, rtol=1e-6, atol=1e-8)


def test_shared_subexpression_accumulates():
    x = T.parameter([2.0])
    y = T.mul(x, x)
    T.sum_all(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_nonfinite_values_rejected():
    with pytest.raises(T.NonFiniteError):
        T.Tensor([np.nan])


def test_backward_needs_scalar():
    with pytest.raises(T.DimensionError):
        T.parameter(np.ones(3)).backward()


def test_grad_check_detects_nondeterminism():
    p = T.parameter(np.ones(2))
    rng = np.random.default_rng(0)

    def loss():
        return T.sum_all(T.mul(p, rng.standard_normal(2)))

    with pytest.raises(T.NondeterministicGraphError):
        T.grad_check(loss, {"p": p})


def test_grad_check_passes_on_smooth_function():
    rng = np.random.default_rng(2)
    w = T.parameter(rng.standard_normal((3, 3)))
    x = rng.standard_normal((4, 3))
    report = T.grad_check(lambda: T.sum_all(T.softmax_rows(T.matmul(T.Tensor(x), w))
                                            * np.arange(12.0).reshape(4, 3)), {"w": w})
    assert report.passed(1e-6)
    assert report.checked["w"] == 9
