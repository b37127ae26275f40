import numpy as np
import pytest

from seqbridge import autodiff as ad
from seqbridge.errors import NumericalError


def _check_op(build, arrays, h=1e-6, tol=1e-6):
    """Compare grad_of against central differences for one composite op."""
    def loss_plain(tables):
        return float(ad.value_of(build({k: np.asarray(v) for k, v in tables.items()})))

    leaves = {k: ad.Var(v) for k, v in arrays.items()}
    loss = build(leaves)
    grads = ad.grad_of(loss, leaves)
    fd = ad.finite_difference_grad(loss_plain,
                                   {k: v.copy() for k, v in arrays.items()}, h=h)
    for k in arrays:
        np.testing.assert_allclose(grads[k], fd[k], atol=tol, rtol=tol)


def test_add_mul_broadcast_grads():
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,)),
              "c": rng.normal(size=(3, 1))}
    _check_op(lambda v: ad.vsum(ad.mul(ad.add(v["a"], v["b"]),
                                       ad.add(v["c"], 2.0))), arrays)


def test_matmul_grads():
    rng = np.random.default_rng(1)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    _check_op(lambda v: ad.vsum(ad.matmul(v["a"], v["b"])), arrays)


def test_batched_matmul_broadcast_grads():
    rng = np.random.default_rng(2)
    arrays = {"w": rng.normal(size=(4, 4))}
    h = rng.normal(size=(2, 3, 4))
    a = rng.normal(size=(3, 3))
    _check_op(lambda v: ad.vsum(ad.matmul(a, ad.matmul(h, v["w"]))), arrays)


def test_log_exp_softplus_abs_grads():
    rng = np.random.default_rng(3)
    arrays = {"x": rng.uniform(0.5, 2.0, size=(5,))}
    _check_op(lambda v: ad.vsum(ad.add(ad.log(v["x"]),
                                       ad.softplus(ad.exp(v["x"])))), arrays)
    arrays = {"x": rng.normal(size=(6,)) + 0.1}
    _check_op(lambda v: ad.vsum(ad.absolute(v["x"])), arrays)


def test_log_softmax_values_and_grads():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5)) * 10
    out = ad.log_softmax(x)
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
    arrays = {"x": x}
    onehot = np.eye(5)[[0, 2, 4]]
    _check_op(lambda v: ad.neg(ad.vsum(ad.mul(ad.log_softmax(v["x"]), onehot))),
              arrays, h=1e-5, tol=1e-5)


def test_clamp_min_gradient_mask():
    x = ad.Var(np.array([-2.0, 0.5, 3.0]))
    loss = ad.vsum(ad.clamp_min(x, 0.0))
    grads = ad.grad_of(loss, {"x": x})
    np.testing.assert_array_equal(grads["x"], [0.0, 1.0, 1.0])


def test_mean_and_axis_sum():
    x = ad.Var(np.arange(12, dtype=float).reshape(3, 4))
    loss = ad.vsum(ad.vmean(ad.vsum(x, axis=1)))
    grads = ad.grad_of(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], np.full((3, 4), 1 / 3))


def test_unused_leaf_gets_zero_grad():
    x, y = ad.Var(np.ones(3)), ad.Var(np.ones(2))
    grads = ad.grad_of(ad.vsum(ad.mul(x, x)), {"x": x, "y": y})
    np.testing.assert_array_equal(grads["y"], np.zeros(2))


def test_same_var_used_twice_accumulates():
    x = ad.Var(np.array([2.0, 3.0]))
    loss = ad.vsum(ad.mul(x, x))
    grads = ad.grad_of(loss, {"x": x})
    np.testing.assert_allclose(grads["x"], [4.0, 6.0])


def test_plain_arrays_fall_through():
    out = ad.add(np.ones(3), np.ones(3))
    assert isinstance(out, np.ndarray)
    assert not isinstance(ad.mul(2.0, np.ones(2)), ad.Var)


def test_nonscalar_loss_rejected():
    x = ad.Var(np.ones(3))
    with pytest.raises(NumericalError):
        ad.grad_of(ad.mul(x, 2.0), {"x": x})


def test_nonfinite_loss_rejected():
    x = ad.Var(np.array(0.0))
    with pytest.raises(NumericalError):
        ad.grad_of(ad.log(x), {"x": x})


def test_sigmoid_stability():
    vals = ad.sigmoid_np(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(vals, [0.0, 0.5, 1.0], atol=1e-12)
    assert np.all(np.isfinite(ad.softplus(np.array([-800.0, 800.0]))))
