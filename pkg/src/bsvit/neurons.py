"""Binary and burst leaky integrate-and-fire neurons.

Both neurons integrate ``U[t] = (beta * U[t-1] + x[t]) * r[t]`` with the soft
reset ``r[t] = clamp(1 - alpha * S[t-1], 0, 1)``.  The clamp keeps a burst of
several spikes from flipping the sign of the membrane: at most a full reset.

* binary: ``S = 1`` iff ``U > v_theta`` (strict)
* burst:  ``S = clamp(floor(U / v_theta), 0, n_max)``, so level 1 starts at
  ``U >= v_theta``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import Module, param
from .profiler import EnergyLedger
from .tensor import DimensionError


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "rectangular"  # or "arctan"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rectangular", "arctan"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.width <= 0:
            raise ValueError("surrogate width must be positive")


@dataclass(frozen=True)
class NeuronParams:
    """Effective (already squashed) neuron constants."""

    beta: float = 0.5
    alpha: float = 1.0
    v_theta: float = 1.0
    n_max: int = 1

    def __post_init__(self):
        if self.v_theta <= 0:
            raise ValueError("v_theta must be positive")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass
class MembraneState:
    potential_u: np.ndarray
    prev_spikes: np.ndarray

    @classmethod
    def fresh(cls, shape, dtype=np.float32) -> "MembraneState":
        return cls(np.zeros(shape, dtype), np.zeros(shape, np.int32))

    def reset(self) -> None:
        self.potential_u[...] = 0
        self.prev_spikes[...] = 0


def _integrate(state: MembraneState, x, params: NeuronParams) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != state.potential_u.shape:
        raise DimensionError(f"input shape {x.shape} != membrane shape {state.potential_u.shape}")
    reset = np.clip(1.0 - params.alpha * state.prev_spikes, 0.0, 1.0)
    u = (params.beta * state.potential_u + x) * reset
    state.potential_u[...] = u
    return state.potential_u


def binary_lif_step(state: MembraneState, x, params: NeuronParams) -> np.ndarray:
    u = _integrate(state, x, params)
    spikes = (u > params.v_theta).astype(np.int32)
    state.prev_spikes[...] = spikes
    return spikes


def burst_lif_step(state: MembraneState, x, params: NeuronParams) -> np.ndarray:
    u = _integrate(state, x, params)
    spikes = np.clip(np.floor(u / params.v_theta), 0, params.n_max).astype(np.int32)
    state.prev_spikes[...] = spikes
    return spikes


def surrogate_grad(x, spec: SurrogateSpec = SurrogateSpec()) -> np.ndarray:
    """Pseudo-derivative of the Heaviside step at ``x`` (distance past threshold)."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    w = spec.width
    if spec.kind == "rectangular":
        return (np.abs(x) < w / 2) / w
    return w / (2.0 * (1.0 + (np.pi * w * x / 2.0) ** 2))


def burst_ste_grad(u, v_theta: float, n_max: int) -> np.ndarray:
    """Straight-through gradient of ``floor(u / v_theta)`` inside the active range."""
    q = np.asarray(u) / v_theta
    return ((q > 0) & (q < n_max)) / v_theta


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_clip(x, lo: float, hi: float, sharpness: float):
    """Smooth clamp to ``[lo, hi]`` and its derivative."""
    k = sharpness
    y = lo + (_softplus(k * (x - lo)) - _softplus(k * (x - hi))) / k
    dy = _sigmoid(k * (x - lo)) - _sigmoid(k * (x - hi))
    return y, dy


class SpikingNeuron(Module):
    """A neuron layer with learnable per-layer decay and reset.

    ``beta`` is stored through a sigmoid (raw 0 gives 0.5) and ``alpha`` through
    a hard clamp to [0, 1] (raw 1 gives a full reset).  Setting ``smooth``
    replaces every step nonlinearity by its smooth surrogate antiderivative;
    it exists for gradient checking and is off in normal use.
    """

    def __init__(self, kind: str = "burst", n_max: int = 20, v_theta: float = 1.0,
                 surrogate: SurrogateSpec = SurrogateSpec(), dtype=np.float32,
                 beta_init: float = 0.0, alpha_init: float = 1.0):
        super().__init__()
        if kind not in ("burst", "binary"):
            raise ValueError(f"unknown neuron kind {kind!r}")
        self.kind = kind
        self.n_max = 1 if kind == "binary" else int(n_max)
        self.v_theta = float(v_theta)
        self.surrogate = surrogate
        self.beta_raw = param(np.asarray(beta_init, dtype))
        self.alpha_raw = param(np.asarray(alpha_init, dtype))
        self.smooth = False
        self.sharpness = 1.0
        NeuronParams(v_theta=self.v_theta, n_max=self.n_max)  # validates

    def params(self) -> NeuronParams:
        beta = float(1.0 / (1.0 + np.exp(-float(self.beta_raw.data))))
        alpha = float(np.clip(self.alpha_raw.data, 0.0, 1.0))
        return NeuronParams(beta, alpha, self.v_theta, self.n_max)

    # inference ---------------------------------------------------------------
    def step(self, state: MembraneState, x) -> np.ndarray:
        fn = burst_lif_step if self.kind == "burst" else binary_lif_step
        return fn(state, x, self.params())

    def run(self, inputs: np.ndarray, ledger: EnergyLedger | None = None,
            layer: str = "neuron") -> np.ndarray:
        return run_neuron_sequence(self, inputs, ledger, layer)

    # training ----------------------------------------------------------------
    def _fire(self, u: np.ndarray):
        vt = self.v_theta
        if self.kind == "binary":
            x = (u - vt) / vt
            if self.smooth:
                w = self.surrogate.width * self.sharpness
                return 0.5 + np.arctan(np.pi * w * x / 2) / np.pi, \
                    surrogate_grad(x, SurrogateSpec("arctan", w)) / vt
            return (u > vt).astype(u.dtype), surrogate_grad(x, self.surrogate) / vt
        q = u / vt
        if self.smooth:
            s, ds = soft_clip(q, 0.0, self.n_max, self.sharpness)
            return s, ds / vt
        return np.clip(np.floor(q), 0, self.n_max), burst_ste_grad(u, vt, self.n_max)

    def _reset(self, z: np.ndarray):
        if self.smooth:
            return soft_clip(z, 0.0, 1.0, self.sharpness)
        # z <= 1 always, so only the lower bound can bind
        return np.clip(z, 0.0, 1.0), (z > 0).astype(z.dtype)

    def forward(self, x: Var) -> Var:
        """Unroll over axis 1 of a (B, T, ...) input current; returns spikes."""
        beta = ag.sigmoid(self.beta_raw)
        alpha = ag.clip(self.alpha_raw, 0.0, 1.0)
        return neuron_sequence(self, x, beta, alpha)


def run_neuron_sequence(layer: SpikingNeuron, inputs, ledger: EnergyLedger | None = None,
                        name: str = "neuron") -> np.ndarray:
    """Run ``layer`` over the leading time axis of ``inputs`` from a fresh state.

    Every neuron/timestep pair with a nonzero emission is one sign event,
    whatever the burst level.
    """
    inputs = np.asarray(inputs)
    dtype = inputs.dtype if inputs.dtype.kind == "f" else np.float32
    state = MembraneState.fresh(inputs.shape[1:], dtype)
    out = np.empty(inputs.shape, np.int32)
    for t in range(inputs.shape[0]):
        out[t] = layer.step(state, inputs[t])
    if ledger is not None:
        ledger.add_sign(name, int(np.count_nonzero(out)))
    return out


def neuron_sequence(layer: SpikingNeuron, x: Var, beta: Var, alpha: Var) -> Var:
    """Autodiff op for a neuron layer unrolled through time (axis 1).

    Backward runs full BPTT: gradient reaches earlier steps through the decay
    term and through the reset factor's dependence on the previous emission.
    """
    xd = x.data
    b = float(beta.data)
    a = float(alpha.data)
    T = xd.shape[1]
    u_prev = np.zeros_like(xd[:, 0])
    s_prev = np.zeros_like(xd[:, 0])
    H, R, DR, U, DS, S = [], [], [], [], [], []
    for t in range(T):
        h = b * u_prev + xd[:, t]
        z = 1.0 - a * s_prev
        r, dr = layer._reset(z)
        u = h * r
        s, ds = layer._fire(u)
        H.append(h), R.append(r), DR.append(dr), U.append(u), DS.append(ds), S.append(s)
        u_prev, s_prev = u, s
    out = np.stack(S, axis=1).astype(xd.dtype, copy=False)

    def bw(g):
        gx = np.empty_like(xd)
        gb = 0.0
        ga = 0.0
        gh_next = np.zeros_like(xd[:, 0])
        gz_next = np.zeros_like(xd[:, 0])
        for t in range(T - 1, -1, -1):
            gs = g[:, t] - a * gz_next
            gu = gs * DS[t] + b * gh_next
            gh = gu * R[t]
            gz = gu * H[t] * DR[t]
            gx[:, t] = gh
            if t > 0:
                gb += float((gh * U[t - 1]).sum())
                ga -= float((gz * S[t - 1]).sum())
            gh_next, gz_next = gh, gz
        return gx, np.asarray(gb, beta.dtype), np.asarray(ga, alpha.dtype)

    return ag.make(out, f"{layer.kind}_neuron", (x, beta, alpha), bw)
