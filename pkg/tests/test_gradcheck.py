import numpy as np
import pytest

from mirrornet.gradcheck import GradCheckReport, NonDifferentiablePoint, grad_check
from mirrornet.nn import Act, BatchNorm, Conv, Sequential
from mirrornet.params import ParamStore


def test_linear_op_is_exact_to_roundoff():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    x = rng.standard_normal(5)
    r = grad_check(lambda v: float(np.sum(a @ v)), x, a.sum(axis=0))
    assert r.max_rel_error < 1e-8
    assert r.n_checked == 5


def test_wrong_gradient_is_caught():
    x = np.array([1.0, 2.0, 3.0])
    r = grad_check(lambda v: float((v**2).sum()), x, 2 * x * 1.01)
    assert not r.passed
    assert "FAIL" in str(r)


def test_kink_is_rejected():
    with pytest.raises(NonDifferentiablePoint):
        grad_check(lambda v: float(np.abs(v).sum()), np.array([0.0]), np.array([0.0]))


def test_subsampled_coordinates():
    x = np.linspace(-1, 1, 100)
    r = grad_check(lambda v: float(np.sin(v).sum()), x, np.cos(x), max_checks=10)
    assert isinstance(r, GradCheckReport) and r.n_checked == 10 and r.passed


def test_shape_mismatch():
    with pytest.raises(ValueError):
        grad_check(lambda v: 0.0, np.zeros(3), np.zeros(2))


def test_conv_bn_relu_chain():
    rng = np.random.default_rng(1)
    store = ParamStore(np.float64)
    net = Sequential(Conv(store, "c", 2, 3, rng=rng), BatchNorm(store, "bn", 3), Act("relu"))
    x = rng.standard_normal((2, 2, 5, 5))
    g = rng.standard_normal((2, 3, 5, 5))
    net.forward(x)
    gx = net.backward(g)
    r = grad_check(lambda v: float((net.forward(v) * g).sum()), x, gx)
    assert r.passed, str(r)
