"""
Tests for the tape: reverse mode, tangents, Hessian-vector products and the
SPD log-determinant.
"""

import numpy as np
import pytest

from src.autodiff import Tape, Tensor, backward, evaluate, hvp, logdet_eig, ops, spd_logdet
from src.errors import (
    AsymmetryError,
    AutodiffUsageError,
    FactorizationError,
    NonFiniteError,
    ShapeMismatchError,
)


def _spd(rng, n, batch=None):
    if batch is None:
        a = rng.standard_normal((n, n))
        return a @ a.T + n * np.eye(n)
    a = rng.standard_normal((batch, n, n))
    return a @ np.swapaxes(a, 1, 2) + n * np.eye(n)


def test_backward_of_sum_of_squares(rng):
    x = rng.standard_normal((3, 2))
    tape, root = evaluate(lambda x: ops.sum(ops.mul(x, x)), {"x": x})
    grads = backward(tape, root)
    np.testing.assert_allclose(grads["x"], 2.0 * x, rtol=0, atol=1e-14)


def test_backward_matches_finite_differences(rng):
    x = rng.standard_normal((4, 3))
    W = rng.standard_normal((2, 3))

    def f(x):
        return ops.sum(ops.softplus(ops.matmul(x, ops.transpose(W))))

    tape, root = evaluate(f, {"x": x})
    g = backward(tape, root)["x"]
    eps = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        fd[idx] = (f(Tensor(up)).value[0, 0] - f(Tensor(down)).value[0, 0]) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-9)


@pytest.mark.parametrize("name", ["softplus", "sigmoid", "relu", "elu", "exp", "tanh", "logcosh", "abs"])
def test_elementwise_gradients(rng, name):
    # keep clear of the kinks at zero
    x = rng.uniform(0.2, 1.5, (3, 2)) * rng.choice([-1.0, 1.0], (3, 2))
    fn = getattr(ops, name)
    tape, root = evaluate(lambda x: ops.sum(fn(x)), {"x": x})
    g = backward(tape, root)["x"]
    eps = 1e-6
    fd = (fn(Tensor(x + eps)).value - fn(Tensor(x - eps)).value) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_constants_get_no_gradient(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 2)), name="x")
    c = Tensor(rng.standard_normal((2, 2)))
    root = ops.sum(ops.mul(x, c))
    grads = tape.backward(root)
    assert list(grads) == ["x"]
    np.testing.assert_allclose(grads["x"], c.value)


def test_intermediate_nodes_can_be_targets(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 3)))
    h = ops.tanh(x)
    root = ops.sum(ops.mul(h, h))
    gh, gx = tape.grad(root, [h, x])
    np.testing.assert_allclose(gh.value, 2 * h.value)
    np.testing.assert_allclose(gx.value, 2 * h.value * (1 - h.value ** 2))


def test_missing_dependency_gives_zeros(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 2)))
    y = tape.leaf(rng.standard_normal((2, 2)))
    root = ops.sum(x)
    gy = tape.grad(root, [y])[0]
    assert np.all(gy.value == 0.0)


def test_hvp_of_quadratic(rng):
    Q = _spd(rng, 3)
    x = rng.standard_normal((1, 3))
    v = rng.standard_normal((1, 3))
    out = hvp(lambda x: ops.scale(ops.sum(ops.mul(ops.matmul(x, Q), x)), 0.5), x, v)
    np.testing.assert_allclose(out, v @ Q, rtol=1e-12)


def test_hvp_of_softplus_is_diagonal(rng):
    x = rng.standard_normal((1, 4))
    v = rng.standard_normal((1, 4))
    out = hvp(lambda x: ops.sum(ops.softplus(x)), x, v)
    s = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(out, s * (1 - s) * v, rtol=1e-10)


def test_hessian_columns_are_row_batched(rng):
    A = rng.standard_normal((3, 3))
    S = A @ A.T
    x = rng.standard_normal((5, 3))
    tape = Tape()
    xt = tape.leaf(x)
    values = ops.scale(ops.sum(ops.mul(ops.matmul(xt, S), xt), axis=1), 0.5)
    grad = tape.grad(ops.sum(values), [xt], create_graph=True)[0]
    columns = tape.hessian_columns(grad, xt)
    for j, col in enumerate(columns):
        np.testing.assert_allclose(col.value, np.tile(S[:, j], (5, 1)), atol=1e-12)


def test_spd_logdet_matches_slogdet_and_inverse_adjoint(rng):
    H = _spd(rng, 4)
    tape = Tape()
    h = tape.leaf(H)
    out = spd_logdet(h)
    assert out.value[0, 0] == pytest.approx(np.linalg.slogdet(H)[1], abs=1e-12)
    g = tape.grad(out, [h])[0]
    np.testing.assert_allclose(g.value, np.linalg.inv(H), rtol=1e-10)


def test_spd_logdet_batched_agrees_with_eigenvalues(rng):
    mats = _spd(rng, 3, batch=6)
    flat = mats.reshape(6, 9)
    np.testing.assert_allclose(spd_logdet(flat, n=3).value, logdet_eig(flat, n=3), rtol=1e-10)


def test_eigen_check_names_the_failing_row(rng):
    mats = _spd(rng, 3, batch=4)
    mats[2] = np.diag([1.0, -1.0, 2.0])
    with pytest.raises(FactorizationError) as info:
        logdet_eig(mats.reshape(4, 9), n=3)
    assert info.value.sample == 2
    assert info.value.pivot == 0


def test_spd_logdet_identity_is_zero():
    assert spd_logdet(np.eye(5)).value[0, 0] == 0.0


def test_spd_logdet_rejects_indefinite_matrix():
    with pytest.raises(FactorizationError) as info:
        spd_logdet(np.diag([1.0, -1.0, 2.0]))
    assert info.value.pivot == 1


def test_spd_logdet_rejects_asymmetric_matrix():
    with pytest.raises(AsymmetryError):
        spd_logdet(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_spd_logdet_adjoint_cannot_be_differentiated(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 2)))
    H = ops.add(ops.matmul(ops.transpose(x), x), Tensor(np.eye(2)))
    root = spd_logdet(H)
    with pytest.raises(AutodiffUsageError):
        tape.grad(root, [x], create_graph=True)


def test_shape_mismatch_names_the_operation():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    with pytest.raises(ShapeMismatchError) as info:
        ops.matmul(a, np.ones((2, 3)))
    assert "matmul" in str(info.value)


def test_mixing_tapes_is_a_usage_error():
    a = Tape().leaf(np.ones((1, 1)))
    b = Tape().leaf(np.ones((1, 1)))
    with pytest.raises(AutodiffUsageError):
        ops.add(a, b)


def test_grad_of_foreign_root_is_a_usage_error():
    tape, other = Tape(), Tape()
    x = other.leaf(np.ones((1, 1)))
    with pytest.raises(AutodiffUsageError):
        tape.grad(ops.sum(x), [x])


def test_non_finite_value_is_reported():
    tape = Tape()
    x = tape.leaf(np.array([[1000.0]]))
    with pytest.raises(NonFiniteError):
        with np.errstate(over="ignore"):
            ops.exp(x)


def test_jvp_of_concat_and_slices(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 3)))
    y = ops.concat([ops.cols(x, 1, 3), ops.col(x, 0)], axis=1)
    t = rng.standard_normal((2, 3))
    out = tape.jvp(y, [x], [t])
    np.testing.assert_allclose(out.value, np.hstack([t[:, 1:3], t[:, :1]]))
