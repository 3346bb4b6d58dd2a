"""AdamW, warmup-cosine schedule and the minibatch training loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Var
from .data import Dataset
from .model import BSViT, ModelConfig, infer


@dataclass
class Schedule:
    """Linear warmup from 0, cosine decay to ``min_lr``, then a flat cooldown.

    Lengths are in optimizer steps.
    """

    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup: int = 0
    total: int = 1
    cooldown: int = 0

    def lr(self, step: int) -> float:
        if step < self.warmup:
            return self.base_lr * step / self.warmup
        decay = max(self.total - self.warmup - self.cooldown, 1)
        k = step - self.warmup
        if k >= decay:
            return self.min_lr
        cos = 0.5 * (1.0 + math.cos(math.pi * k / decay))
        return self.min_lr + (self.base_lr - self.min_lr) * cos


@dataclass
class OptimState:
    schedule: Schedule
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @property
    def lr(self) -> float:
        return self.schedule.lr(self.step)


def adamw_step(params: list[Var], state: OptimState) -> float:
    """One AdamW update in place; returns the learning rate that was used.

    Weight decay is decoupled and skips vectors and scalars (BN affine,
    biases, neuron constants).  Parameters without a gradient still decay.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    lr = state.lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("moment shape mismatch")
        if p.data.ndim > 1 and state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return lr


def as_sequence(images: np.ndarray, timesteps: int) -> np.ndarray:
    """(B, C, H, W) static images become (B, T, C, H, W) by repetition."""
    if images.ndim == 4:
        return np.repeat(images[:, None], timesteps, axis=1)
    return images


def train_step(model: BSViT, x: np.ndarray, y: np.ndarray, optim: OptimState,
               smoothing: float = 0.1) -> tuple[float, int, float]:
    """Forward/backward/update on one minibatch; returns (loss, n_correct, lr)."""
    model.train()
    model.zero_grad()
    logits = model.forward(Var(as_sequence(x, model.config.timesteps)))
    loss = ag.cross_entropy(logits, y, smoothing)
    loss.backward()
    lr = adamw_step(model.parameters(), optim)
    correct = int((logits.data.argmax(axis=1) == y).sum())
    return float(loss.data), correct, lr


def train_epoch(model: BSViT, data: Dataset, optim: OptimState, batch_size: int = 64,
                rng: np.random.Generator | None = None, smoothing: float = 0.1) -> dict:
    """One pass over ``data``; shuffles when ``rng`` is given.

    Returns the sample-weighted mean loss, the training accuracy measured on
    the fly, and the learning rate of the final step.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    total_loss, correct, lr = 0.0, 0, optim.lr
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, hit, lr = train_step(model, data.images[idx], data.labels[idx], optim, smoothing)
        total_loss += loss * len(idx)
        correct += hit
    return {"loss": total_loss / n, "acc": correct / n, "lr": lr}


def predict_logits(model: BSViT, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode logits from the training graph (no ledger, no autodiff tape)."""
    model.eval()
    out = []
    with ag.no_grad():
        for start in range(0, len(images), batch_size):
            x = as_sequence(images[start:start + batch_size], model.config.timesteps)
            out.append(model.forward(Var(x)).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: BSViT, data: Dataset, engine: str = "graph") -> dict:
    """Top-1 accuracy and per-class counts.

    ``engine="graph"`` evaluates batched through the float graph;
    ``engine="spike"`` runs each sample through the addition-only engine.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if engine == "spike":
        model.eval()
        logits = np.stack([infer(model, img) for img in data.images])
    else:
        logits = predict_logits(model, data.images)
    pred = logits.argmax(axis=1)
    k = data.num_classes
    per_class = {str(c): {"total": int((data.labels == c).sum()),
                          "correct": int(((pred == c) & (data.labels == c)).sum())} for c in range(k)}
    return {"accuracy": float((pred == data.labels).mean()), "n": int(len(data)), "per_class": per_class}


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 2e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 2
    cooldown_epochs: int = 0
    weight_decay: float = 0.05
    smoothing: float = 0.1
    seed: int = 0
    target_acc: float | None = None  # early stop once eval-mode training accuracy reaches it

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fit(model: BSViT, data: Dataset, cfg: TrainConfig, log_path: str | Path | None = None) -> list[dict]:
    """Train ``model`` and return (and optionally write as JSON lines) per-epoch metrics."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    sched = Schedule(cfg.lr, cfg.min_lr, cfg.warmup_epochs * steps_per_epoch,
                     cfg.epochs * steps_per_epoch, cfg.cooldown_epochs * steps_per_epoch)
    optim = OptimState(sched, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            m = train_epoch(model, data, optim, cfg.batch_size, rng, cfg.smoothing)
            rec = {"epoch": epoch, "lr": m["lr"], "loss": m["loss"], "acc": m["acc"]}
            if cfg.target_acc is not None:
                # stop on eval-mode accuracy, not the running batch-statistics figure
                rec["eval_acc"] = evaluate(model, data)["accuracy"]
            history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if cfg.target_acc is not None and rec["eval_acc"] >= cfg.target_acc:
                break
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return history


def smoothed_ce_floor(classes: int, smoothing: float) -> float:
    """Minimum of label-smoothed cross-entropy: the entropy of the smoothed target."""
    if smoothing == 0:
        return 0.0
    on = 1.0 - smoothing + smoothing / classes
    off = smoothing / classes
    return float(-(on * math.log(on) + (classes - 1) * off * math.log(off)))


def default_toy_config(**overrides) -> ModelConfig:
    """The desk-scale BSViT-1-32 used for quick experiments (16x16, T=2, n_max=4)."""
    base = dict(in_channels=1, height=16, width=16, timesteps=2, depth=1, dim=32, heads=1,
                n_max=4, num_classes=2, stem_pools=2)
    base.update(overrides)
    return ModelConfig(**base)
