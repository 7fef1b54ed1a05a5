import numpy as np
import pytest

from spmdsim import ops
from spmdsim.engine import EngineError, Var, backward, no_grad

from conftest import rand


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def test_backward_requires_scalar():
    x = Var(rand((3, 3)), requires_grad=True)
    with pytest.raises(EngineError):
        backward(ops.relu(x))


def test_no_grad_suppresses_tape():
    x = Var(rand((3,)), requires_grad=True)
    with no_grad():
        y = ops.scale(x, 2.0)
    assert y.node is None and not y.requires_grad


def test_grad_accumulates_over_reuse():
    x = Var(np.array([3.0]), requires_grad=True)
    y = ops.tensor_sum(ops.mul(x, x))  # d/dx x^2 = 2x
    backward(y)
    assert np.allclose(x.grad, [6.0])


def test_mm_chain_matches_finite_difference():
    A = rand((4, 5), seed=1)
    B = rand((5, 3), seed=2)
    va, vb = Var(A.copy(), True), Var(B.copy(), True)
    loss = ops.tensor_sum(ops.relu(ops.mm(va, vb)))
    backward(loss)

    def f_a(x):
        return np.maximum(x @ B, 0).sum()

    def f_b(x):
        return np.maximum(A @ x, 0).sum()

    assert rel_err(va.grad, fd_grad(f_a, A)) < 1e-6
    assert rel_err(vb.grad, fd_grad(f_b, B)) < 1e-6


def test_mse_gradient():
    P = rand((6, 4), seed=3)
    T = rand((6, 4), seed=4)
    vp = Var(P.copy(), True)
    backward(ops.mse(vp, Var(T)))
    assert np.allclose(vp.grad, 2 * (P - T) / P.size)


def test_reshape_transpose_gradients():
    X = rand((4, 6), seed=5)
    v = Var(X.copy(), True)
    y = ops.tensor_sum(ops.mul(ops.reshape(ops.transpose(v), (24,)),
                               Var(rand((24,), seed=6))))
    backward(y)

    def f(x):
        return (x.T.reshape(24) * rand((24,), seed=6)).sum()

    assert rel_err(v.grad, fd_grad(f, X)) < 1e-6


def test_dropout_gradient_uses_mask(fresh_runtime):
    rt = fresh_runtime(seed=9)
    X = rand((8, 8), seed=7)
    v = Var(X.copy(), True)
    y = ops.dropout(v, 0.5)
    kept = y.value != 0
    backward(ops.tensor_sum(y))
    # gradient is the rescaled keep mask
    assert np.allclose(v.grad[kept], 2.0)
    assert np.allclose(v.grad[~kept], 0.0)
