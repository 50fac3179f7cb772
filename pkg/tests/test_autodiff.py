import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow import autodiff as ad
from resflow.errors import ShapeMismatch
from resflow.geometry import euler_to_rotation as np_euler


def numeric_grad(f, x, h=1e-6):
    """Central differences of the scalar function ``f`` at array ``x``."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def check(fn, *arrays, tol=1e-6):
    """Compare autodiff gradients of ``sum(w * fn(...))`` against central differences."""
    rng = np.random.default_rng(0)
    out_shape = np.shape(fn(*[ad.tensor(a) for a in arrays]).data)
    w = rng.normal(size=out_shape)
    leaves = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.sum(fn(*leaves) * w).backward()
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [ad.tensor(b) for b in arrays]
            args[k] = ad.tensor(x)
            return float((fn(*args).data * w).sum())
        assert rel_err(leaves[k].grad, numeric_grad(f, a.copy())) < tol


def test_mean_gradient_is_one_over_n():
    x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.mean(x).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 1 / 6))


def test_matmul_gradient_3x4_4x2():
    rng = np.random.default_rng(1)
    check(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    check(ad.matmul, rng.normal(size=(4,)), rng.normal(size=(4, 2)))
    check(ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4,)))


def test_relu_subgradient_at_zero():
    x = ad.tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul])
def test_elementwise_with_broadcast(op):
    rng = np.random.default_rng(2)
    check(op, rng.normal(size=(5, 3)), rng.normal(size=(3,)))
    check(op, rng.normal(size=(1, 3)), rng.normal(size=(4, 3)))


def test_unary_ops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from the kink
    check(ad.relu, x)
    check(ad.tanh, x)
    check(ad.row_norm, x)
    check(ad.norm, x)
    check(ad.pool_mean, x)
    check(lambda t: ad.sum(t, axis=0), x)
    check(lambda t: ad.mean(t, axis=1), x)
    check(ad.transpose, x)
    check(lambda t: ad.reshape(t, (20,)), x)
    check(lambda t: t[1:3, [0, 2, 2]], x)
    check(lambda t: ad.gather_rows(t, [3, 0, 0, 2]), x)
    check(lambda t: ad.stack_rows(t[0], 6), x)
    check(lambda t: t / 4.0 - t * 2 + (-t), x)


def test_concat():
    rng = np.random.default_rng(4)
    check(lambda a, b: ad.concat([a, b]), rng.normal(size=(3,)), rng.normal(size=(5,)))
    check(lambda a, b: ad.concat([a, b], axis=1), rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))


def test_euler_ops_forward_and_gradient():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.uniform(-1.2, 1.2, size=3)
        np.testing.assert_array_equal(ad.euler_to_rotation(a).data, np_euler(a))
        check(ad.euler_to_rotation, a)
        R = np_euler(a)
        np.testing.assert_allclose(ad.rotation_to_euler(R).data, a, atol=1e-12)
        # round trip through both ops keeps gradients consistent
        check(lambda t: ad.rotation_to_euler(ad.euler_to_rotation(t)), a)


def test_rotation_to_euler_gradient_on_raw_matrix():
    # perturbations leave SO(3); the op is still a smooth function of the entries
    rng = np.random.default_rng(6)
    R = np_euler(rng.uniform(-1, 1, size=3))
    check(ad.rotation_to_euler, R)


def test_shared_node_accumulates():
    x = ad.tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x  # x used three times
    ad.sum(y * y).backward()
    xv = np.array([2.0, -3.0])
    np.testing.assert_allclose(x.grad, 2 * (xv * xv + xv) * (2 * xv + 1))


def test_deep_chain_no_recursion_limit():
    x = ad.tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1e-3
    ad.sum(y).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_constants_get_no_gradient():
    x = ad.tensor(np.ones(3), requires_grad=True)
    c = ad.tensor(np.ones(3))
    ad.sum(x * c).backward()
    assert c.grad is None
    assert ad.mul(c, 2.0).requires_grad is False


def test_zero_norm_gradients():
    x = ad.tensor(np.zeros((2, 3)), requires_grad=True)
    ad.sum(ad.row_norm(x)).backward()
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))
    v = ad.tensor(np.zeros(3), requires_grad=True)
    ad.norm(v).backward()
    np.testing.assert_array_equal(v.grad, np.zeros(3))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((3, 4)), np.ones((3, 2)))
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones((3, 4)), np.ones((2, 4)))
    with pytest.raises(ShapeMismatch):
        ad.mul(ad.tensor(np.ones(3)), np.ones(4))
    with pytest.raises(ShapeMismatch):
        ad.concat([np.ones((2, 3)), np.ones((3, 2))], axis=1)
    with pytest.raises(ShapeMismatch):
        ad.tensor(np.ones(3), requires_grad=True).backward()
    with pytest.raises(ShapeMismatch):
        ad.euler_to_rotation(np.ones(4))


def test_numpy_defers_to_tensor():
    t = ad.tensor(np.ones(3), requires_grad=True)
    out = np.full(3, 2.0) * t
    assert isinstance(out, ad.Tensor)
    out = np.ones((2, 3)) @ ad.tensor(np.ones((3, 1)))
    assert isinstance(out, ad.Tensor)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_pool_mean_bitwise_permutation_invariant(n, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c)) * 10 ** rng.uniform(-3, 3, size=(n, c))
    a = ad.pool_mean(x).data
    b = ad.pool_mean(x[rng.permutation(n)]).data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, x.mean(axis=0), rtol=1e-12, atol=1e-12)
