import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsvit import autograd as ag
from bsvit.neurons import (MembraneState, NeuronParams, SpikingNeuron, SurrogateSpec, binary_lif_step,
                           burst_lif_step, burst_ste_grad, run_neuron_sequence, soft_clip, surrogate_grad)
from bsvit.profiler import EnergyLedger


def test_binary_threshold_is_strict():
    st_ = MembraneState.fresh(3)
    out = binary_lif_step(st_, np.array([1.0, 1.0001, 0.5]), NeuronParams(beta=0.5, alpha=1.0))
    assert out.tolist() == [0, 1, 0]


def test_burst_levels_floor():
    p = NeuronParams(beta=0.0, alpha=0.0, v_theta=1.0, n_max=4)
    st_ = MembraneState.fresh(5)
    out = burst_lif_step(st_, np.array([0.99, 1.0, 2.5, 3.999, 50.0]), p)
    assert out.tolist() == [0, 1, 2, 3, 4]


def test_reset_clamped_full_reset_after_burst():
    p = NeuronParams(beta=0.5, alpha=1.0, v_theta=1.0, n_max=5)
    st_ = MembraneState.fresh(1)
    assert burst_lif_step(st_, np.array([3.2]), p)[0] == 3
    # clamp(1 - 3, 0, 1) = 0: a full reset, never a sign flip
    burst_lif_step(st_, np.array([0.4]), p)
    assert st_.potential_u[0] == 0.0


def test_reset_partial():
    p = NeuronParams(beta=1.0, alpha=0.25, v_theta=1.0, n_max=5)
    st_ = MembraneState.fresh(1)
    burst_lif_step(st_, np.array([2.0]), p)  # S = 2
    burst_lif_step(st_, np.array([0.0]), p)
    assert st_.potential_u[0] == pytest.approx(2.0 * 0.5)


def test_decay():
    p = NeuronParams(beta=0.5, alpha=1.0)
    st_ = MembraneState.fresh(1)
    binary_lif_step(st_, np.array([0.8]), p)
    binary_lif_step(st_, np.array([0.0]), p)
    assert st_.potential_u[0] == pytest.approx(0.4)


def test_params_validation():
    with pytest.raises(ValueError):
        NeuronParams(v_theta=0)
    with pytest.raises(ValueError):
        NeuronParams(n_max=0)
    with pytest.raises(ValueError):
        SurrogateSpec("gauss")


def test_state_shape_mismatch():
    from bsvit.tensor import DimensionError
    with pytest.raises(DimensionError):
        binary_lif_step(MembraneState.fresh(3), np.zeros(4), NeuronParams())


def test_learnable_param_defaults():
    n = SpikingNeuron("burst", 8)
    p = n.params()
    assert p.beta == pytest.approx(0.5) and p.alpha == 1.0 and p.n_max == 8
    assert SpikingNeuron("binary", 8).n_max == 1


def test_sequence_counts_sign_events():
    n = SpikingNeuron("burst", 4)
    led = EnergyLedger()
    x = np.array([[0.5, 2.5, 9.0], [0.0, 0.0, 0.0]], np.float32)
    out = run_neuron_sequence(n, x, led, "n")
    assert led.n_sign == int(np.count_nonzero(out))
    assert out[0].tolist() == [0, 2, 4]


def test_surrogates():
    assert surrogate_grad(np.array([0.0]))[0] == 1.0
    assert surrogate_grad(np.array([0.6]))[0] == 0.0
    a = surrogate_grad(np.array([0.0]), SurrogateSpec("arctan"))
    assert a[0] == pytest.approx(0.5)
    g = burst_ste_grad(np.array([-0.1, 0.5, 3.9, 4.0]), 1.0, 4)
    assert g.tolist() == [0, 1, 1, 0]


def test_soft_clip_limits():
    y, dy = soft_clip(np.array([-50.0, 0.5, 50.0]), 0.0, 1.0, 4.0)
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-6)
    assert dy[1] > dy[0] and dy[1] > dy[2]


def test_training_forward_matches_inference():
    rng = np.random.default_rng(0)
    n = SpikingNeuron("burst", 6)
    n.beta_raw.data[...] = 0.3
    n.alpha_raw.data[...] = 0.7
    x = rng.normal(1.0, 2.0, size=(3, 4, 5)).astype(np.float32)  # (B, T, F)
    train_out = n.forward(ag.Var(x)).data
    for b in range(3):
        np.testing.assert_array_equal(train_out[b], n.run(x[b]))


def test_parameter_gets_zero_grad_outside_support():
    # membrane never near threshold: the rectangular surrogate is zero everywhere
    n = SpikingNeuron("binary")
    w = ag.Var(np.array(0.01, np.float32), requires_grad=True)
    x = ag.Var(np.full((2, 3, 4), 5.0, np.float32))
    out = n.forward(x * w)
    out.sum().backward()
    assert w.grad == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_burst_range_property(beta, alpha, n_max, seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(6, 10))
    st_ = MembraneState.fresh(10, np.float64)
    p = NeuronParams(beta, alpha, 1.0, n_max)
    for t in range(6):
        s = burst_lif_step(st_, x[t], p)
        assert s.min() >= 0 and s.max() <= n_max
