"""Parameterised layers shared by the training graph and the inference engine.

Each layer has ``forward`` (autodiff :class:`Var` in, ``Var`` out, float
matmuls) and, where it sits on the spiking path, ``run`` (numpy in, numpy
out, addition-only kernels charged to an :class:`EnergyLedger`).
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Var
from .profiler import EnergyLedger
from .tensor import (BNParams, conv2d, conv2d_addonly, fold_batchnorm, matmul_addonly,
                     matmul_float)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def param(data) -> Var:
    return Var(np.array(data), requires_grad=True)


class Module:
    training = True

    def __init__(self) -> None:
        self._buffer_names: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffer_names.append(name)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Var]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Var) and value.requires_grad:
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in getattr(mod, "_buffer_names", ()):
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def parameters(self) -> list[Var]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - (set(params) | set(buffers))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in buffers.items():
            b[...] = state[name]


class Linear(Module):
    """``y = x @ W (+ b)`` with ``W`` stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False,
                 std: float = 0.02, dtype=np.float32):
        super().__init__()
        self.weight = param(trunc_normal(rng, (d_in, d_out), std, dtype))
        self.bias = param(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x: Var) -> Var:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def run(self, spikes: np.ndarray, ledger: EnergyLedger | None, layer: str,
            bn: "BatchNorm | None" = None) -> np.ndarray:
        """Addition-only inference on integer spikes, with ``bn`` folded in."""
        w = self.weight.data
        b = None if self.bias is None else self.bias.data
        if bn is not None:
            w, b = fold_batchnorm(w, bn.stats(), out_axis=-1, bias=b)
        lead = spikes.shape[:-1]
        out = matmul_addonly(spikes.reshape(-1, spikes.shape[-1]), w, ledger, layer)
        if b is not None:
            out = out + b
        return out.reshape(*lead, w.shape[1])

    def run_float(self, x: np.ndarray, ledger: EnergyLedger | None, layer: str) -> np.ndarray:
        lead = x.shape[:-1]
        out = matmul_float(x.reshape(-1, x.shape[-1]), self.weight.data)
        if self.bias is not None:
            out = out + self.bias.data
        if ledger is not None:
            ledger.add_mac(layer, out.size * self.weight.data.shape[0])
        return out.reshape(*lead, -1)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, padding: int = 1, dtype=np.float32):
        super().__init__()
        std = np.sqrt(2.0 / (c_out * kernel * kernel))
        self.weight = param((rng.standard_normal((c_out, c_in, kernel, kernel)) * std).astype(dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Var) -> Var:
        return ag.conv2d(x, self.weight, self.stride, self.padding)

    def _folded(self, bn: "BatchNorm | None"):
        if bn is None:
            return self.weight.data, None
        return fold_batchnorm(self.weight.data, bn.stats(), out_axis=0)

    def run(self, spikes: np.ndarray, ledger: EnergyLedger | None, layer: str,
            bn: "BatchNorm | None" = None) -> np.ndarray:
        w, b = self._folded(bn)
        out = conv2d_addonly(spikes, w, self.stride, self.padding, ledger, layer)
        return out if b is None else out + b[:, None, None]

    def run_float(self, x: np.ndarray, ledger: EnergyLedger | None, layer: str,
                  bn: "BatchNorm | None" = None) -> np.ndarray:
        w, b = self._folded(bn)
        return conv2d(x, w, self.stride, self.padding, b, ledger, layer)


class BatchNorm(Module):
    def __init__(self, channels: int, axis: int = -1, zero_init: bool = False,
                 dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = param(np.full(channels, 0.0 if zero_init else 1.0, dtype))
        self.beta = param(np.zeros(channels, dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))
        self.axis = axis
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Var) -> Var:
        return ag.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.axis, self.eps, self.momentum)

    def stats(self) -> BNParams:
        return BNParams(self.gamma.data, self.beta.data, self.running_mean, self.running_var,
                        self.eps, self.momentum)
