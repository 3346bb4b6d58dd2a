"""Finite-difference verification of the autodiff engine on a smoothed model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .model import BSViT, ModelConfig, build_model


@dataclass
class GradCheckResult:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    eps: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if len(self.rel_error) else 0.0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(a, n, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps probes whose true gradient is near zero from turning the
    O(eps^2) truncation error of a central difference into a large ratio.
    """
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def toy_gradcheck_model(seed: int = 0, dim: int = 16, n_max: int = 4, classes: int = 3,
                        sharpness: float = 0.5) -> BSViT:
    """A float64 BSViT-1-16 (16 tokens, T=2) in smooth mode with randomised affine params.

    Zero-initialised BN gammas would block whole branches, so every BN gets
    a gamma in [0.2, 0.5] and a small random shift; neuron decay and reset
    move off their defaults so their gradients are exercised too.
    """
    cfg = ModelConfig(in_channels=1, height=16, width=16, timesteps=2, depth=1, dim=dim, heads=1,
                      n_max=n_max, num_classes=classes, stem_pools=2, dtype="float64", seed=seed)
    model = build_model(cfg)
    model.set_smooth(True, sharpness)
    model.train()
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters():
        if name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.2, 0.5, p.data.shape)
        elif name.endswith(".beta") and p.data.ndim == 1:
            p.data[...] = rng.normal(0.0, 0.2, p.data.shape)
        elif name.endswith("beta_raw"):
            p.data[...] = rng.normal()
        elif name.endswith("alpha_raw"):
            p.data[...] = rng.uniform(0.3, 0.9)
    return model


def gradient_check(model: BSViT, x: np.ndarray, y: np.ndarray, probes: int = 200, eps: float = 1e-3,
                   seed: int = 0, smoothing: float = 0.1) -> GradCheckResult:
    """Compare backprop against central differences on ``probes`` random parameter entries.

    BN running buffers are restored after every forward so that the probed
    function is a pure function of the parameters.
    """
    saved = {k: v.copy() for k, v in model.named_buffers()}
    buffers = dict(model.named_buffers())

    def restore():
        for k, v in saved.items():
            buffers[k][...] = v

    def loss_value() -> float:
        with ag.no_grad():
            value = float(ag.cross_entropy(model.forward(Var(x)), y, smoothing).data)
        restore()
        return value

    model.zero_grad()
    ag.cross_entropy(model.forward(Var(x)), y, smoothing).backward()
    restore()
    params = list(model.named_parameters())
    rng = np.random.default_rng(seed)
    names, analytic, numeric = [], [], []
    for _ in range(probes):
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = p.data[idx].copy()
        p.data[idx] = old + eps
        up = loss_value()
        p.data[idx] = old - eps
        down = loss_value()
        p.data[idx] = old
        names.append(f"{name}{list(idx)}")
        analytic.append(0.0 if p.grad is None else float(p.grad[idx]))
        numeric.append((up - down) / (2 * eps))
    a, n = np.array(analytic), np.array(numeric)
    return GradCheckResult(names, a, n, relative_error(a, n), eps)
