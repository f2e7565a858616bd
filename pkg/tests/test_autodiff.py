import numpy as np
import pytest

from xriqa.model import autodiff as ad
from xriqa.model.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_op(build, tensors, tol=1e-6):
    """build() -> scalar Tensor; compares backward grads against central
    finite differences for every input tensor."""
    out = build()
    out.backward()
    grads = {name: t.grad.copy() for name, t in tensors.items()}
    for name, t in tensors.items():
        ref = numeric_grad(lambda: float(build().data), t.data)
        np.testing.assert_allclose(grads[name], ref, atol=tol, rtol=tol,
                                   err_msg=f"gradient mismatch for {name}")


class TestOpGradients:
    def test_dense(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        check_op(lambda: _sum2(ad.dense(x, w, b)), {"x": x, "w": w, "b": b})

    def test_conv2d(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 6, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.2, requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        check_op(lambda: _sum_all(ad.conv2d(x, w, b, stride=2, pad=1)),
                 {"x": x, "w": w, "b": b})

    def test_conv2d_odd_geometry(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(1, 2, 5, 7)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.2, requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        check_op(lambda: _sum_all(ad.conv2d(x, w, b, stride=2, pad=1)),
                 {"x": x, "w": w})

    def test_swish(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 4)) * 3, requires_grad=True)
        check_op(lambda: _sum2(ad.swish(x)), {"x": x})

    def test_channel_norm(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        mean = rng.normal(size=3)
        var = rng.uniform(0.5, 2.0, size=3)
        check_op(lambda: _sum_all(ad.channel_norm(x, gamma, beta, mean, var)),
                 {"x": x, "gamma": gamma, "beta": beta})

    def test_gap_and_concat(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 2, 4, 6)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        check_op(lambda: _sum2(ad.concat([ad.gap(a), c], axis=1)), {"a": a, "c": c})

    def test_squared_error_sum(self):
        rng = np.random.default_rng(6)
        p = Tensor(rng.normal(size=5), requires_grad=True)
        target = rng.normal(size=5)
        check_op(lambda: ad.squared_error_sum(p, target), {"p": p})


def _sum2(t: Tensor) -> Tensor:
    return ad.squared_error_sum(_flatten(t), np.zeros(t.data.size))


def _sum_all(t: Tensor) -> Tensor:
    return ad.squared_error_sum(_flatten(t), np.zeros(t.data.size))


def _flatten(t: Tensor) -> Tensor:
    out = Tensor(t.data.reshape(-1), parents=(t,))

    def backward(g):
        if t.requires_grad or t._parents:
            t._accumulate(g.reshape(t.data.shape))
    out._backward = backward
    out.requires_grad = t.requires_grad or bool(t._parents)
    return out


class TestEngine:
    def test_backward_requires_scalar(self):
        t = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            t.backward()

    def test_grad_accumulates_across_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.add(x, x)  # dy/dx = 2
        loss = ad.squared_error_sum(y, np.zeros(1))  # d/dy = 2y = 8
        loss.backward()
        assert x.grad[0] == pytest.approx(16.0)

    def test_zero_grad(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        loss = ad.squared_error_sum(x, np.zeros(1))
        loss.backward()
        assert x.grad is not None
        x.zero_grad()
        assert x.grad is None

    def test_frozen_tensor_gets_no_grad(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(np.array([[1.0], [1.0]]), requires_grad=False)
        b = Tensor(np.zeros(1), requires_grad=True)
        loss = ad.squared_error_sum(_flatten(ad.dense(x, w, b)), np.zeros(1))
        loss.backward()
        assert w.grad is None
        assert b.grad is not None
