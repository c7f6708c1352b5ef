"""Gradient-engine checks against hand-derived derivatives and finite
differences."""

import numpy as np
import pytest

from blocknav import autodiff as ad
from blocknav.errors import NonFiniteLoss


def central_diff(fn, arrays, h=1e-6):
    """Finite-difference gradients of fn(*arrays) wrt every array."""
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*arrays)
            flat[i] = orig - h
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return grads


def test_affine_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    tx, tw, tb = ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)
    y = ad.affine(tx, tw, tb)
    assert np.array_equal(y.value, x @ w.T + b)


def test_affine_gradients_vs_finite_difference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    c = rng.normal(size=(4, 2))

    def loss_np(x, w, b):
        return float(np.sum((x @ w.T + b) * c))

    tx, tw, tb = ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)
    out = ad.affine(tx, tw, tb)
    loss = ad.sum_squares(ad.sub(out, ad.constant(out.value - 0.5 * c)))
    # sum((y - (y - c/2))^2) = sum(c^2)/4, with d/dy = c: same as loss_np + const.
    ad.backward(loss)
    fx, fw, fb = central_diff(loss_np, [x.copy(), w.copy(), b.copy()])
    assert np.allclose(tx.grad, fx, atol=1e-6)
    assert np.allclose(tw.grad, fw, atol=1e-6)
    assert np.allclose(tb.grad, fb, atol=1e-6)


def test_relu_gradient_masks_negative_and_zero():
    x = ad.Tensor(np.array([[-1.0, 0.0, 2.0]]))
    y = ad.relu(x)
    loss = ad.sum_squares(y)
    ad.backward(loss)
    assert np.array_equal(y.value, [[0.0, 0.0, 2.0]])
    assert np.array_equal(x.grad, [[0.0, 0.0, 4.0]])


def test_chain_quadratic_analytic():
    # loss = ||W x||^2 has gradient 2 W^T W x wrt x and 2 (W x) x^T wrt W.
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(1, 4))
    tw, tx = ad.Tensor(w), ad.Tensor(x)
    y = ad.affine(tx, tw, ad.constant(np.zeros(3)))
    loss = ad.sum_squares(y)
    ad.backward(loss)
    assert np.allclose(tx.grad, 2.0 * (x @ w.T) @ w, atol=1e-12)
    assert np.allclose(tw.grad, 2.0 * (x @ w.T).T @ x, atol=1e-12)


def test_concat_and_split_gradients():
    a = ad.Tensor(np.ones((2, 2)))
    b = ad.Tensor(np.full((2, 3), 2.0))
    y = ad.concat([a, b])
    assert y.value.shape == (2, 5)
    weights = np.arange(10.0).reshape(2, 5)
    loss = ad.sum_squares(ad.sub(y, ad.constant(y.value - weights)))
    ad.backward(loss)
    assert np.allclose(a.grad, 2.0 * weights[:, :2])
    assert np.allclose(b.grad, 2.0 * weights[:, 2:])


def test_gather_rows_accumulates_duplicates():
    x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    idx = np.array([0, 0, 1])
    y = ad.gather_rows(x, idx)
    assert np.array_equal(y.value, [[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]])
    loss = ad.sum_squares(y)
    ad.backward(loss)
    # Row 0 is used twice: grad = 2 * 2 * x0.
    assert np.array_equal(x.grad, [[4.0, 8.0], [6.0, 8.0]])


def test_scatter_sum_forward_and_gradient():
    x = ad.Tensor(np.array([[1.0], [2.0], [3.0]]))
    idx = np.array([1, 1, 0])
    y = ad.scatter_sum(x, idx, 2)
    assert np.array_equal(y.value, [[3.0], [3.0]])
    loss = ad.sum_squares(y)
    ad.backward(loss)
    assert np.array_equal(x.grad, [[6.0], [6.0], [6.0]])


def test_shared_node_gradient_accumulates():
    x = ad.Tensor(np.array([[1.5]]))
    y = ad.add(x, x)
    loss = ad.sum_squares(y)  # (2x)^2, d/dx = 8x
    ad.backward(loss)
    assert np.allclose(x.grad, [[12.0]])


def test_clamp_rows_values():
    v = np.array([[3.0, 4.0], [0.01, 0.0], [0.0, 0.0]])
    out = ad.clamp_rows(ad.Tensor(v), v_max=1.0, eps=1e-6)
    assert np.allclose(out.value[0], [0.59999988, 0.79999984], atol=1e-10)
    assert np.array_equal(out.value[1], v[1])
    assert np.array_equal(out.value[2], [0.0, 0.0])
    assert np.linalg.norm(out.value[0]) <= 1.0


def test_clamp_rows_gradient_vs_finite_difference():
    rng = np.random.default_rng(3)
    v = np.vstack(
        [
            rng.normal(size=(3, 2)) * 2.0,   # mostly clamped
            rng.normal(size=(3, 2)) * 0.05,  # mostly pass-through
        ]
    )
    c = rng.normal(size=v.shape)

    def loss_np(v):
        norms = np.linalg.norm(v, axis=1)
        factor = np.where(norms + 1e-6 > 0.2, 0.2 / (norms + 1e-6), 1.0)
        factor = np.minimum(factor, 1.0)
        return float(np.sum((v * factor[:, None]) * c))

    tv = ad.Tensor(v)
    out = ad.clamp_rows(tv, v_max=0.2, eps=1e-6)
    loss = ad.sum_squares(ad.sub(out, ad.constant(out.value - 0.5 * c)))
    ad.backward(loss)
    (fd,) = central_diff(loss_np, [v.copy()])
    assert np.allclose(tv.grad, fd, atol=1e-5)


def test_backward_rejects_nonscalar_and_nonfinite():
    x = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(NonFiniteLoss):
        ad.backward(x)
    bad = ad.scale(ad.sum_squares(x), np.inf)
    with pytest.raises(NonFiniteLoss):
        ad.backward(bad)


def test_backward_handles_deep_chains():
    # Iterative toposort: must not hit the recursion limit.
    x = ad.Tensor(np.array([[1.0]]))
    y = x
    for _ in range(5000):
        y = ad.scale(y, 1.0)
    loss = ad.sum_squares(y)
    ad.backward(loss)
    assert np.allclose(x.grad, [[2.0]])
