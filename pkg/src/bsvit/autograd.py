"""A small reverse-mode autodiff engine over numpy arrays.

Each :class:`Var` remembers the op that produced it, its input vars and a
closure holding whatever the backward rule needs.  :func:`backward` orders
the recorded graph topologically and visits every node once, in reverse.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .tensor import _im2col, conv_output_size, DimensionError


class AutogradError(RuntimeError):
    pass


_GRAD_ENABLED = contextvars.ContextVar("bsvit_grad_enabled", default=True)


@contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Var", ...] = (), backward: BackwardFn | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def make(data, op: str, parents: tuple[Var, ...], backward_fn: BackwardFn) -> Var:
    """Wrap an op result, recording it only when some input needs a gradient."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Var(data, True, op, parents, backward_fn)
    return Var(data, False, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not isinstance(loss, Var) or loss._backward is None:
        raise AutogradError("backward() needs the output of a recorded forward pass")
    if loss.data.size != 1:
        raise AutogradError(f"backward() needs a scalar loss, got shape {loss.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, "add", (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    return make(ad * bd, "mul", (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {ad.shape} and {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make(ad @ bd, "matmul", (a, b), bw)


def exp(a: Var) -> Var:
    out = np.exp(a.data)
    return make(out, "exp", (a,), lambda g: (g * out,))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp with gradient passed on the closed interval ``[lo, hi]``."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * inside,))


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bw)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape
    count = a.data.size // np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), bw)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes=None) -> Var:
    inv = None if axes is None else tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), "transpose", (a,),
                lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# layer ops
# ---------------------------------------------------------------------------

def conv2d(x: Var, w: Var, stride: int = 1, padding: int = 0) -> Var:
    """Cross-correlation over the last three axes of ``x`` (..., C, H, W)."""
    xd, wd = x.data, w.data
    *lead, C, H, W = xd.shape
    O, Cw, kh, kw = wd.shape
    if Cw != C:
        raise DimensionError(f"kernel shape {wd.shape} does not fit input {xd.shape}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    flat = xd.reshape(-1, C, H, W)
    cols = _im2col(flat, kh, kw, stride, padding)  # (M, Ho, Wo, K)
    wmat = wd.reshape(O, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2).reshape(*lead, O, Ho, Wo)

    def bw(g):
        g2 = g.reshape(-1, O, Ho, Wo).transpose(0, 2, 3, 1)
        gw = np.tensordot(g2, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(wd.shape)
        dcols = (g2 @ wmat).reshape(-1, Ho, Wo, C, kh, kw)
        gx = np.zeros((flat.shape[0], C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    dcols[..., i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx.reshape(xd.shape), gw

    return make(out, "conv2d", (x, w), bw)


def _pool_windows(xd: np.ndarray, k: int):
    *lead, H, W = xd.shape
    if H % k or W % k:
        raise DimensionError(f"spatial extent {(H, W)} not divisible by pool size {k}")
    win = xd.reshape(*lead, H // k, k, W // k, k)
    nd = win.ndim
    win = np.moveaxis(win, nd - 3, nd - 2).reshape(*lead, H // k, W // k, k * k)

    def unwindow(gw):
        gw = gw.reshape(*lead, H // k, W // k, k, k)
        return np.moveaxis(gw, nd - 2, nd - 3).reshape(xd.shape)

    return win, unwindow


def maxpool2d(x: Var, k: int = 2) -> Var:
    xd = x.data
    win, unwindow = _pool_windows(xd, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (unwindow(gw),)

    return make(out, "maxpool2d", (x,), bw)


def softmaxpool2d(x: Var, k: int = 2, sharpness: float = 4.0) -> Var:
    """Smooth max-pool: ``log(mean(exp(c * x))) / c`` over each window.

    Lies between the window mean and max and tends to the max as ``c`` grows.
    """
    c = sharpness
    win, unwindow = _pool_windows(x.data, k)
    top = win.max(axis=-1, keepdims=True)
    e = np.exp(c * (win - top))
    z = e.sum(axis=-1, keepdims=True)
    out = (top + np.log(z / win.shape[-1]) / c)[..., 0]
    w = e / z

    def bw(g):
        return (unwindow(w * g[..., None]),)

    return make(out, "softmaxpool2d", (x,), bw)


def batchnorm(x: Var, gamma: Var, beta: Var, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, axis: int, eps: float = 1e-5, momentum: float = 0.1) -> Var:
    """Batch norm over all axes but ``axis``; updates running stats when training."""
    xd = x.data
    axis = axis % xd.ndim
    C = xd.shape[axis]
    shape = [1] * xd.ndim
    shape[axis] = C
    red = tuple(i for i in range(xd.ndim) if i != axis)
    gd = gamma.data.reshape(shape)
    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (xd - running_mean.reshape(shape)) * inv
        out = xhat * gd + beta.data.reshape(shape)

        def bw_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return make(out.astype(xd.dtype, copy=False), "batchnorm", (x, gamma, beta), bw_eval)

    n = xd.size // C
    mu = xd.mean(axis=red, keepdims=True)
    var = xd.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gd + beta.data.reshape(shape)
    running_mean *= 1 - momentum
    running_mean += momentum * mu.reshape(C)
    running_var *= 1 - momentum
    running_var += momentum * var.reshape(C) * n / max(n - 1, 1)

    def bw(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=red, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=red, keepdims=True)
        gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make(out.astype(xd.dtype, copy=False), "batchnorm", (x, gamma, beta), bw)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smooth_targets(targets: np.ndarray, classes: int, smoothing: float, dtype=np.float64) -> np.ndarray:
    t = np.full((len(targets), classes), smoothing / classes, dtype=dtype)
    t[np.arange(len(targets)), targets] += 1.0 - smoothing
    return t


def cross_entropy(logits: Var, targets, smoothing: float = 0.0) -> Var:
    """Mean label-smoothed cross entropy of (B, classes) logits."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} and targets {targets.shape} do not match")
    tgt = smooth_targets(targets, z.shape[1], smoothing, z.dtype)
    logp = log_softmax(z)
    loss = -(tgt * logp).sum() / z.shape[0]

    def bw(g):
        return (g * (np.exp(logp) - tgt) / z.shape[0],)

    return make(np.asarray(loss, dtype=z.dtype), "cross_entropy", (logits,), bw)
