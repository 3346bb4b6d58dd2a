"""Patch splitting stem, burst MLP, encoder block and classification head.

Training layouts are (B, T, ...) and inference layouts (T, ...).  Residual
sums always combine float membrane potentials; every tensor that enters a
synaptic kernel at inference is a nonnegative integer spike map.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .attention import AdjacencyMask, SpikingAttention
from .autograd import Var
from .neurons import SpikingNeuron, SurrogateSpec
from .nn import BatchNorm, Conv2d, Linear, Module
from .profiler import EnergyLedger
from .tensor import DimensionError, maxpool2d


class PatchSplitting(Module):
    """Four-stage conv stem plus a conditional relative position embedding.

    Stage widths are ``C -> D/8 -> D/4 -> D/2 -> D``; the last ``pools``
    stages halve the resolution with a 2x2 max-pool.  The first three
    stages spike (conv -> BN -> burst neuron -> pool); the fourth ends at
    its BN (then pool) and is the float membrane ``H``.  The embedding adds
    ``BN(conv3x3(SN(H)))`` to ``H``.
    """

    def __init__(self, in_channels: int, dim: int, rng: np.random.Generator, pools: int = 2,
                 n_max: int = 20, surrogate: SurrogateSpec = SurrogateSpec(), dtype=np.float32):
        super().__init__()
        if dim % 8:
            raise DimensionError(f"embedding dimension {dim} must be divisible by 8")
        if not 0 <= pools <= 4:
            raise ValueError("pools must be between 0 and 4")
        widths = [in_channels, dim // 8, dim // 4, dim // 2, dim]
        self.pools = pools
        self.convs = [Conv2d(widths[i], widths[i + 1], rng, dtype=dtype) for i in range(4)]
        self.bns = [BatchNorm(widths[i + 1], axis=-3, dtype=dtype) for i in range(4)]
        self.lifs = [SpikingNeuron("burst", n_max, surrogate=surrogate, dtype=dtype) for _ in range(3)]
        self.rpe_lif = SpikingNeuron("burst", n_max, surrogate=surrogate, dtype=dtype)
        self.rpe_conv = Conv2d(dim, dim, rng, dtype=dtype)
        self.rpe_bn = BatchNorm(dim, axis=-3, zero_init=True, dtype=dtype)
        self.smooth = False  # soft pooling for gradient checks

    @property
    def stride(self) -> int:
        return 2 ** self.pools

    def grid(self, height: int, width: int) -> tuple[int, int]:
        s = self.stride
        if height % s or width % s:
            raise DimensionError(f"input {height}x{width} not divisible by stem stride {s}")
        return height // s, width // s

    def _pooled(self, i: int) -> bool:
        return i >= 4 - self.pools

    def forward(self, x: Var) -> tuple[Var, tuple[int, int]]:
        grid = self.grid(*x.shape[-2:])
        for i in range(4):
            x = self.bns[i].forward(self.convs[i].forward(x))
            if i < 3:
                x = self.lifs[i].forward(x)
            if self._pooled(i):
                x = ag.softmaxpool2d(x) if self.smooth else ag.maxpool2d(x)
        h = x
        u0 = h + self.rpe_bn.forward(self.rpe_conv.forward(self.rpe_lif.forward(h)))
        B, T, D, Hp, Wp = u0.shape
        return u0.reshape(B, T, D, Hp * Wp).transpose(0, 1, 3, 2), grid

    def run(self, x: np.ndarray, ledger: EnergyLedger | None = None,
            layer: str = "bsps") -> tuple[np.ndarray, tuple[int, int]]:
        grid = self.grid(*x.shape[-2:])
        for i in range(4):
            name = f"{layer}.stage{i}"
            if i == 0:
                x = self.convs[0].run_float(x, ledger, f"{name}.conv", self.bns[0])
            else:
                x = self.convs[i].run(x, ledger, f"{name}.conv", self.bns[i])
            if i < 3:
                x = self.lifs[i].run(x, ledger, f"{name}.lif")
            if self._pooled(i):
                x = maxpool2d(x)
        h = x
        s = self.rpe_lif.run(h, ledger, f"{layer}.rpe.lif")
        u0 = h + self.rpe_conv.run(s, ledger, f"{layer}.rpe.conv", self.rpe_bn)
        T, D, Hp, Wp = u0.shape
        return u0.reshape(T, D, Hp * Wp).transpose(0, 2, 1), grid


class BurstMLP(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator, n_max: int = 20,
                 surrogate: SurrogateSpec = SurrogateSpec(), dtype=np.float32):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.bn1 = BatchNorm(hidden, dtype=dtype)
        self.lif = SpikingNeuron("burst", n_max, surrogate=surrogate, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)
        self.bn2 = BatchNorm(dim, zero_init=True, dtype=dtype)

    @property
    def hidden(self) -> int:
        return self.fc1.weight.shape[1]

    def forward(self, s: Var) -> Var:
        h = self.lif.forward(self.bn1.forward(self.fc1.forward(s)))
        return self.bn2.forward(self.fc2.forward(h))

    def run(self, s: np.ndarray, ledger: EnergyLedger | None = None, layer: str = "mlp") -> np.ndarray:
        h = self.fc1.run(s, ledger, f"{layer}.fc1", self.bn1)
        h = self.lif.run(h, ledger, f"{layer}.lif")
        return self.fc2.run(h, ledger, f"{layer}.fc2", self.bn2)


class EncoderBlock(Module):
    """``U' = Attn(S) + U``; ``S' = SN(U')``; ``U_out = MLP(S') + U'``; ``S_out = SN(U_out)``."""

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1, mlp_ratio: int = 4,
                 n_max: int = 20, variant: str = "dbssa", mask: AdjacencyMask | None = None,
                 surrogate: SurrogateSpec = SurrogateSpec(), dtype=np.float32):
        super().__init__()
        self.attn = SpikingAttention(dim, rng, heads, n_max, variant, mask, surrogate, dtype)
        self.attn_lif = SpikingNeuron("burst", n_max, surrogate=surrogate, dtype=dtype)
        self.mlp = BurstMLP(dim, mlp_ratio, rng, n_max, surrogate, dtype)
        self.out_lif = SpikingNeuron("burst", n_max, surrogate=surrogate, dtype=dtype)
        self.last_u_mid = None

    def forward(self, s: Var, u: Var) -> tuple[Var, Var]:
        u_mid = self.attn.forward(s) + u
        s_mid = self.attn_lif.forward(u_mid)
        u_out = self.mlp.forward(s_mid) + u_mid
        return self.out_lif.forward(u_out), u_out

    def run(self, s: np.ndarray, u: np.ndarray, ledger: EnergyLedger | None = None,
            layer: str = "block") -> tuple[np.ndarray, np.ndarray]:
        u_mid = self.attn.run(s, ledger, f"{layer}.attn") + u
        self.last_u_mid = u_mid
        s_mid = self.attn_lif.run(u_mid, ledger, f"{layer}.attn_lif")
        u_out = self.mlp.run(s_mid, ledger, f"{layer}.mlp") + u_mid
        return self.out_lif.run(u_out, ledger, f"{layer}.out_lif"), u_out


class ClassificationHead(Module):
    """Token-average pooling then a linear classifier, logits averaged over time."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fc = Linear(dim, num_classes, rng, bias=True, dtype=dtype)

    def forward(self, s: Var) -> Var:
        return self.fc.forward(s.mean(axis=2)).mean(axis=1)

    def run(self, s: np.ndarray, ledger: EnergyLedger | None = None, layer: str = "head") -> np.ndarray:
        pooled = s.mean(axis=1, dtype=self.fc.weight.dtype)
        return self.fc.run_float(pooled, ledger, layer).mean(axis=0)
