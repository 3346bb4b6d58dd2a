"""Spiking self-attention: the dual-channel burst variant, its binary baseline,
the patch adjacency mask and a float softmax reference.

Inference kernels work per timestep and head on integer spike matrices and
never multiply.  The similarity ``Q K^T`` adds key columns into the rows of
firing queries; aggregation adds attention counts into the channels where a
value row fires.  With a mask, aggregation walks the (at most nine) neighbour
lists instead of all ``N`` keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autograd as ag
from .autograd import Var
from .neurons import SpikingNeuron, SurrogateSpec
from .nn import BatchNorm, Linear, Module, param
from .profiler import AttentionStats, EnergyLedger, trap_guard, trap_release
from .tensor import BNParams, DimensionError, check_spikes, fold_batchnorm, matmul_addonly


@dataclass
class AdjacencyMask:
    grid_h: int
    grid_w: int
    matrix: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def nnz(self) -> int:
        return int(self.matrix.sum())

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(N, 9) neighbour indices per row, padded with -1."""
        out = np.full((self.n, 9), -1, dtype=np.int64)
        for i in range(self.n):
            idx = np.flatnonzero(self.matrix[i])
            out[i, :idx.size] = idx
        return out

    def row_nnz(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def build_adjacency(grid_h: int, grid_w: int) -> AdjacencyMask:
    """Self-inclusive 8-connected neighbourhoods of a row-major patch grid."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {grid_h}x{grid_w}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    near_r = np.abs(rows[:, None] - rows[None, :]) <= 1
    near_c = np.abs(cols[:, None] - cols[None, :]) <= 1
    return AdjacencyMask(grid_h, grid_w, (near_r & near_c).astype(np.uint8))


# ---------------------------------------------------------------------------
# addition-only kernels
# ---------------------------------------------------------------------------

def similarity_addonly(q: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, int]:
    """Integer ``q @ k.T`` by column additions; returns (attn, AC count).

    A key entry of burst level ``b`` gated by a query spike costs ``b`` ACs.
    """
    n_q, d = q.shape
    attn = np.zeros((n_q, k.shape[0]), dtype=np.int64)
    q_t, k_t, attn_t = trap_guard("similarity", q, k, attn)
    for c in range(d):
        col = k_t[:, c]
        for level in range(1, int(q[:, c].max(initial=0)) + 1):
            rows = np.flatnonzero(q_t[:, c] >= level)
            attn_t[rows] += col
    acs = int(np.dot(q.sum(axis=0, dtype=np.int64), k.sum(axis=0, dtype=np.int64)))
    return trap_release(attn), acs


def aggregate_addonly(attn: np.ndarray, v: np.ndarray,
                      neighbors: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Integer ``attn @ v`` for binary ``v``; returns (out, AC count).

    Each nonzero attention entry ``(i, j)`` adds its count once into every
    channel where value row ``j`` fired.  With ``neighbors`` only those
    pairs are visited.
    """
    n, d = v.shape
    out = np.zeros((attn.shape[0], d), dtype=np.int64)
    attn_t, v_t, out_t = trap_guard("aggregation", attn, v, out)
    if neighbors is None:
        ii, jj = np.nonzero(attn_t)
    else:
        ii = np.repeat(np.arange(neighbors.shape[0]), neighbors.shape[1])
        jj = neighbors.reshape(-1)
        valid = jj >= 0
        ii, jj = ii[valid], jj[valid]
        keep = attn_t[ii, jj] > 0
        ii, jj = ii[keep], jj[keep]
    pair, ch = np.nonzero(v_t[jj])
    np.add.at(out_t, (ii[pair], ch), attn_t[ii[pair], jj[pair]])
    return trap_release(out), int(pair.size)


def _dense_aggregation_cost(attn: np.ndarray, v: np.ndarray) -> int:
    return int(np.dot((attn > 0).sum(axis=0), v.sum(axis=1)))


# ---------------------------------------------------------------------------
# functional forward passes (single sample, time-major)
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projection weights (in, out) with per-projection BN and the output scale.

    ``w_vminus`` is None for single-channel (SSA-style) value paths.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_vplus: np.ndarray
    w_vminus: np.ndarray | None
    bn_q: BNParams | None = None
    bn_k: BNParams | None = None
    bn_vplus: BNParams | None = None
    bn_vminus: BNParams | None = None
    scale_s: float = 1.0
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        ws = [self.w_q, self.w_k, self.w_vplus] + ([self.w_vminus] if self.w_vminus is not None else [])
        if any(w.shape[0] != d for w in ws):
            raise DimensionError("all projections must share the input dimension")
        if self.scale_s <= 0:
            raise ValueError("scale_s must be positive")
        if self.heads < 1 or self.w_q.shape[1] % self.heads:
            raise DimensionError(f"dimension {self.w_q.shape[1]} not divisible by {self.heads} heads")


def _project(x: np.ndarray, w: np.ndarray, bn: BNParams | None, neuron: SpikingNeuron,
             ledger: EnergyLedger | None, layer: str) -> np.ndarray:
    b = None
    if bn is not None:
        w, b = fold_batchnorm(w, bn, out_axis=-1)
    T, N, D = x.shape
    cur = matmul_addonly(x.reshape(T * N, D), w, ledger, layer)
    if b is not None:
        cur = cur + b
    return neuron.run(cur.reshape(T, N, -1), ledger, layer + ".lif")


def project_qkv(x_spikes, params: AttentionParams, neurons, ledger: EnergyLedger | None = None,
                layer: str = "attn"):
    """Spike projections ``(Q, K, V+, V-raw)``; ``V-raw`` stays unsigned.

    ``neurons`` is a 4-tuple of neuron layers (query, key, excitatory value,
    inhibitory value).  Returns ``None`` for ``V-raw`` when the params have no
    inhibitory channel.
    """
    x = check_spikes(x_spikes, "x_spikes")
    if x.ndim != 3 or x.shape[2] != params.w_q.shape[0]:
        raise DimensionError(f"input {x.shape} does not fit projections of width {params.w_q.shape[0]}")
    nq, nk, nvp, nvm = neurons
    q = _project(x, params.w_q, params.bn_q, nq, ledger, f"{layer}.q")
    k = _project(x, params.w_k, params.bn_k, nk, ledger, f"{layer}.k")
    vp = _project(x, params.w_vplus, params.bn_vplus, nvp, ledger, f"{layer}.vplus")
    vm = None
    if params.w_vminus is not None:
        vm = _project(x, params.w_vminus, params.bn_vminus, nvm, ledger, f"{layer}.vminus")
    return q, k, vp, vm


def attend(Q, K, Vp, Vm_raw, mask: AdjacencyMask | None, heads: int = 1,
           ledger: EnergyLedger | None = None, layer: str = "attn") -> np.ndarray:
    """Integer ``(Q K^T [*A]) V+ - (Q K^T [*A]) V-raw`` per timestep and head.

    The mask is applied right after the similarity stage; zeroed pairs do
    no aggregation work at all.
    """
    Q, K, Vp = (check_spikes(a, n) for a, n in ((Q, "Q"), (K, "K"), (Vp, "Vp")))
    if Vm_raw is not None:
        Vm_raw = check_spikes(Vm_raw, "Vm_raw")
    T, N, D = Q.shape
    if K.shape != Q.shape or Vp.shape[:2] != (T, N) or (Vm_raw is not None and Vm_raw.shape != Vp.shape):
        raise DimensionError(f"attention operand shapes disagree: Q{Q.shape} K{K.shape} V{Vp.shape}")
    if D % heads or Vp.shape[2] % heads:
        raise DimensionError(f"dimension {D} not divisible by {heads} heads")
    if mask is not None and mask.n != N:
        raise DimensionError(f"mask covers {mask.n} patches but there are {N} tokens")
    neighbors = None if mask is None else mask.neighbors
    dq, dv = D // heads, Vp.shape[2] // heads
    out = np.zeros(Vp.shape, dtype=np.int64)
    sim_ac = agg_ac = agg_dense = 0
    for t in range(T):
        for h in range(heads):
            qs, vs = slice(h * dq, (h + 1) * dq), slice(h * dv, (h + 1) * dv)
            attn, acs = similarity_addonly(Q[t, :, qs], K[t, :, qs])
            sim_ac += acs
            for v, sign in ((Vp[t, :, vs], 1), (None if Vm_raw is None else Vm_raw[t, :, vs], -1)):
                if v is None:
                    continue
                agg, acs = aggregate_addonly(attn, v, neighbors)
                agg_ac += acs
                agg_dense += _dense_aggregation_cost(attn, v)
                if sign > 0:
                    out[t, :, vs] += agg
                else:
                    out[t, :, vs] -= agg
    if ledger is not None:
        ledger.add_sop(f"{layer}.similarity", sim_ac)
        ledger.add_sop(f"{layer}.aggregation", agg_ac)
        ledger.add_attention(layer, AttentionStats(
            timesteps=T, tokens=N, dim=D, heads=heads,
            q_events=int(Q.sum()), q_size=Q.size, k_events=int(K.sum()), k_size=K.size,
            similarity_ac=sim_ac, aggregation_ac=agg_ac, aggregation_ac_dense=agg_dense,
            mask_row_nnz=float(N if mask is None else mask.row_nnz().mean())))
    return out


def dbssa_forward(Q, K, Vp, Vm_raw, mask: AdjacencyMask | None, scale_s: float,
                  out_neuron: SpikingNeuron, ledger: EnergyLedger | None = None,
                  heads: int = 1, layer: str = "attn") -> np.ndarray:
    """Dual-channel burst attention: scaled signed aggregate through ``out_neuron``."""
    agg = attend(Q, K, Vp, Vm_raw, mask, heads, ledger, layer)
    current = agg * scale_s  # the only float multiply, outside the spike kernels
    dtype = np.float64 if isinstance(scale_s, np.float64) else np.float32
    return out_neuron.run(current.astype(dtype), ledger, f"{layer}.out_lif")


def ssa_forward(x_spikes, params: AttentionParams, scale: float, out_neuron: SpikingNeuron,
                neurons, ledger: EnergyLedger | None = None, layer: str = "ssa") -> np.ndarray:
    """Binary spiking self-attention ``SN(Q K^T V * s)`` with binary Q, K, V.

    ``params.w_vplus`` is the single value projection; ``neurons`` is
    (query, key, value) and must all be binary.
    """
    if any(n.kind != "binary" for n in neurons):
        raise ValueError("SSA uses binary neurons for Q, K and V")
    single = AttentionParams(params.w_q, params.w_k, params.w_vplus, None, params.bn_q,
                             params.bn_k, params.bn_vplus, None, scale, params.heads)
    q, k, v, _ = project_qkv(x_spikes, single, (*neurons, None), ledger, layer)
    return dbssa_forward(q, k, v, None, None, scale, out_neuron, ledger, params.heads, layer)


def vsa_oracle(x, w_q, w_k, w_v) -> np.ndarray:
    """Float softmax attention on (N, D) tokens; reference only."""
    x, w_q, w_k, w_v = trap_guard("vsa", *(np.asarray(a, dtype=np.float64) for a in (x, w_q, w_k, w_v)))
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=1, keepdims=True)
    return trap_release(p @ v)


# ---------------------------------------------------------------------------
# trainable layer
# ---------------------------------------------------------------------------

VARIANTS = {
    # name: (burst key, dual value channel, burst output neuron)
    "dbssa": (True, True, True),
    "ssa": (False, False, False),
    "ssa+burst_k": (True, False, True),
    "ssa+dual_v": (False, True, True),
}


class SpikingAttention(Module):
    """Attention block branch: projections, spiking attention, output projection.

    ``variant`` selects the ablation ladder from plain binary SSA up to the
    full dual-channel burst attention.  The output projection's BN starts at
    zero so the residual branch is initially silent.
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1, n_max: int = 20,
                 variant: str = "dbssa", mask: AdjacencyMask | None = None,
                 surrogate: SurrogateSpec = SurrogateSpec(), dtype=np.float32):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {variant!r}")
        if dim % heads:
            raise DimensionError(f"dimension {dim} not divisible by {heads} heads")
        burst_k, dual_v, burst_out = VARIANTS[variant]
        self.variant = variant
        self.dim = dim
        self.heads = heads
        self.mask = mask

        def neuron(burst: bool) -> SpikingNeuron:
            return SpikingNeuron("burst" if burst else "binary", n_max, surrogate=surrogate, dtype=dtype)

        self.w_q = Linear(dim, dim, rng, dtype=dtype)
        self.w_k = Linear(dim, dim, rng, dtype=dtype)
        self.w_vplus = Linear(dim, dim, rng, dtype=dtype)
        self.w_vminus = Linear(dim, dim, rng, dtype=dtype) if dual_v else None
        self.bn_q = BatchNorm(dim, dtype=dtype)
        self.bn_k = BatchNorm(dim, dtype=dtype)
        self.bn_vplus = BatchNorm(dim, dtype=dtype)
        self.bn_vminus = BatchNorm(dim, dtype=dtype) if dual_v else None
        self.q_lif = neuron(False)
        self.k_lif = neuron(burst_k)
        self.vplus_lif = neuron(False)
        self.vminus_lif = neuron(False) if dual_v else None
        head_dim = dim // heads
        self.log_s = param(np.asarray(-0.5 * np.log(head_dim * (n_max if burst_k else 1)), dtype))
        self.out_lif = neuron(burst_out)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.proj_bn = BatchNorm(dim, zero_init=True, dtype=dtype)

    @property
    def scale_s(self) -> float:
        return float(np.exp(self.log_s.data))

    def attention_params(self) -> AttentionParams:
        return AttentionParams(
            self.w_q.weight.data, self.w_k.weight.data, self.w_vplus.weight.data,
            None if self.w_vminus is None else self.w_vminus.weight.data,
            self.bn_q.stats(), self.bn_k.stats(), self.bn_vplus.stats(),
            None if self.bn_vminus is None else self.bn_vminus.stats(),
            self.scale_s, self.heads)

    def forward(self, s: Var) -> Var:
        B, T, N, D = s.shape
        h, dh = self.heads, D // self.heads

        def split(v: Var) -> Var:
            return v.reshape(B, T, N, h, dh).transpose(0, 1, 3, 2, 4)

        q = split(self.q_lif.forward(self.bn_q.forward(self.w_q.forward(s))))
        k = split(self.k_lif.forward(self.bn_k.forward(self.w_k.forward(s))))
        v = split(self.vplus_lif.forward(self.bn_vplus.forward(self.w_vplus.forward(s))))
        attn = q @ k.transpose(0, 1, 2, 4, 3)
        if self.mask is not None:
            attn = attn * self.mask.matrix.astype(attn.dtype)
        if self.w_vminus is not None:
            vm = split(self.vminus_lif.forward(self.bn_vminus.forward(self.w_vminus.forward(s))))
            v = v - vm
        out = (attn @ v).transpose(0, 1, 3, 2, 4).reshape(B, T, N, D)
        out = out * ag.exp(self.log_s)
        return self.proj_bn.forward(self.proj.forward(self.out_lif.forward(out)))

    def run(self, s: np.ndarray, ledger: EnergyLedger | None = None, layer: str = "attn") -> np.ndarray:
        params = self.attention_params()
        neurons = (self.q_lif, self.k_lif, self.vplus_lif, self.vminus_lif)
        q, k, vp, vm = project_qkv(s, params, neurons, ledger, layer)
        scale = np.asarray(self.scale_s, dtype=self.log_s.dtype)[()]
        o = dbssa_forward(q, k, vp, vm, self.mask, scale, self.out_lif, ledger, self.heads, layer)
        return self.proj.run(o, ledger, f"{layer}.proj", self.proj_bn)
