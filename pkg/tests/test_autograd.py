import numpy as np
import pytest

from bsvit import autograd as ag
from bsvit.autograd import AutogradError, Var


def numgrad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def test_linear_gradient_is_outer_product(rng):
    x = rng.normal(size=(3, 4))
    w = Var(rng.normal(size=(4, 2)), requires_grad=True)
    (Var(x) @ w).sum().backward()
    np.testing.assert_allclose(w.grad, x.sum(axis=0)[:, None] * np.ones((1, 2)))


def test_backward_without_graph_raises():
    with pytest.raises(AutogradError):
        Var(np.array(1.0)).backward()
    with pytest.raises(AutogradError):
        ag.backward(Var(np.ones(3), requires_grad=True) * 2.0)


def test_broadcast_unbroadcast(rng):
    a = Var(rng.normal(size=(3, 4)), requires_grad=True)
    b = Var(rng.normal(size=(4,)), requires_grad=True)
    ((a + b) * b).sum().backward()
    np.testing.assert_allclose(b.grad, (a.data + 2 * b.data).sum(axis=0))


def test_shared_node_accumulates():
    x = Var(np.array(3.0), requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_no_grad_builds_no_graph():
    x = Var(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad


@pytest.mark.parametrize("op", ["exp", "sigmoid", "mean", "transpose", "reshape", "sub"])
def test_elementwise_ops_numeric(rng, op):
    xd = rng.normal(size=(3, 4))
    x = Var(xd, requires_grad=True)
    w = rng.normal(size=(3, 4))
    fns = {
        "exp": lambda v: ag.exp(v) * Var(w),
        "sigmoid": lambda v: ag.sigmoid(v) * Var(w),
        "mean": lambda v: v.mean(axis=1, keepdims=True) * Var(w),
        "transpose": lambda v: v.transpose(1, 0) * Var(w.T),
        "reshape": lambda v: v.reshape(4, 3) * Var(w.reshape(4, 3)),
        "sub": lambda v: (1.0 - v) * Var(w),
    }
    fns[op](x).sum().backward()
    num = numgrad(lambda: float(fns[op](Var(xd)).data.sum()), xd)
    np.testing.assert_allclose(x.grad, num, rtol=1e-5, atol=1e-7)


def test_conv2d_maxpool_bn_numeric(rng):
    xd = rng.normal(size=(2, 1, 2, 4, 4))
    wd = rng.normal(size=(3, 2, 3, 3))
    g = rng.uniform(0.5, 1.5, 3)
    bt = rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    probe = rng.normal(size=(2, 1, 3, 2, 2))

    def f(x, w, gamma, beta):
        y = ag.conv2d(x, w, padding=1)
        y = ag.batchnorm(y, gamma, beta, rm.copy(), rv.copy(), training=True, axis=-3)
        return (ag.maxpool2d(y) * Var(probe)).sum()

    x, w = Var(xd, requires_grad=True), Var(wd, requires_grad=True)
    gv, bv = Var(g, requires_grad=True), Var(bt, requires_grad=True)
    f(x, w, gv, bv).backward()
    for var, arr in ((x, xd), (w, wd), (gv, g), (bv, bt)):
        num = numgrad(lambda: float(f(Var(xd), Var(wd), Var(g), Var(bt)).data), arr)
        np.testing.assert_allclose(var.grad, num, rtol=1e-4, atol=1e-6)


def test_softmaxpool_bounds_and_grad(rng):
    xd = rng.normal(size=(1, 1, 4, 4))
    x = Var(xd, requires_grad=True)
    y = ag.softmaxpool2d(x, sharpness=4.0)
    hard = ag.maxpool2d(Var(xd)).data
    assert (y.data <= hard + 1e-12).all()
    y.sum().backward()
    num = numgrad(lambda: float(ag.softmaxpool2d(Var(xd), sharpness=4.0).data.sum()), xd)
    np.testing.assert_allclose(x.grad, num, rtol=1e-5, atol=1e-8)


def test_cross_entropy_gradient_and_floor(rng):
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    zv = Var(z, requires_grad=True)
    ag.cross_entropy(zv, y, 0.1).backward()
    num = numgrad(lambda: float(ag.cross_entropy(Var(z), y, 0.1).data), z)
    np.testing.assert_allclose(zv.grad, num, rtol=1e-5, atol=1e-8)


def test_smoothed_ce_minimum():
    from bsvit.training import smoothed_ce_floor
    k = 4
    target = ag.smooth_targets(np.array([2]), k, 0.1)
    perfect = Var(np.log(target))  # logits whose softmax equals the smoothed target
    assert float(ag.cross_entropy(perfect, np.array([2]), 0.1).data) == pytest.approx(smoothed_ce_floor(k, 0.1))
    hard = Var(np.array([[0.0, 0.0, 60.0, 0.0]]))
    assert float(ag.cross_entropy(hard, np.array([2]), 0.0).data) == pytest.approx(0.0, abs=1e-12)
    assert float(ag.cross_entropy(hard, np.array([2]), 0.1).data) > smoothed_ce_floor(k, 0.1)


def test_neuron_sequence_bptt_numeric(rng):
    from bsvit.neurons import SpikingNeuron
    n = SpikingNeuron("burst", 4, dtype=np.float64)
    n.smooth = True
    n.beta_raw.data[...] = 0.2
    n.alpha_raw.data[...] = 0.6
    xd = rng.normal(1.0, 1.5, size=(2, 4, 3))
    probe = rng.normal(size=xd.shape)
    x = Var(xd, requires_grad=True)
    (n.forward(x) * Var(probe)).sum().backward()
    f = lambda: float((n.forward(Var(xd)).data * probe).sum())
    np.testing.assert_allclose(x.grad, numgrad(f, xd), rtol=1e-5, atol=1e-8)
    gb, ga = float(n.beta_raw.grad), float(n.alpha_raw.grad)
    assert gb == pytest.approx(numgrad(f, n.beta_raw.data)[()], rel=1e-5, abs=1e-9)
    assert ga == pytest.approx(numgrad(f, n.alpha_raw.data)[()], rel=1e-5, abs=1e-9)
