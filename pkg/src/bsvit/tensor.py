"""Dense numeric kernels for the inference engine.

Float tensors are plain ``np.ndarray`` (float32 unless the caller passes
float64 weights); spike payloads are integer arrays.  Time is always the
outermost axis.  Nothing here broadcasts beyond a per-channel affine.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .profiler import EnergyLedger, trap_guard, trap_release


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class ContractError(ValueError):
    """An operand violates a kernel precondition (e.g. negative spikes)."""


def _float_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*[a.dtype for a in arrays if a.dtype.kind == "f"] or [np.float32])
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


def check_spikes(spikes, name: str = "spikes") -> np.ndarray:
    s = np.asarray(spikes)
    if s.dtype.kind not in "iub":
        raise ContractError(f"{name} must be an integer tensor, got dtype {s.dtype}")
    if s.dtype.kind == "b":
        return s.astype(np.int32)
    if s.size and s.min() < 0:
        raise ContractError(f"{name} contains negative entries (min {s.min()})")
    return s


def matmul_float(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out_dtype = _float_dtype(a, b)
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype)


def matmul_addonly(spikes, weights, ledger: EnergyLedger | None = None,
                   layer: str = "matmul") -> np.ndarray:
    """Spike-by-weight product computed with additions only.

    A spike count ``s`` at ``spikes[m, k]`` adds row ``weights[k]`` into
    output row ``m`` exactly ``s`` times.  The ledger is charged
    ``sum(spikes) * P`` synaptic operations.
    """
    s = check_spikes(spikes)
    w = np.asarray(weights)
    if s.ndim != 2 or w.ndim != 2 or s.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply shapes {s.shape} and {w.shape}")
    out_dtype = _float_dtype(w)
    M, P = s.shape[0], w.shape[1]
    out = np.zeros((M, P), dtype=np.float64)
    s_t, w_t, out_t = trap_guard("matmul_addonly", s, w.astype(np.float64), out)
    top = int(s.max()) if s.size else 0
    for level in range(1, top + 1):
        rows, cols = np.nonzero(s_t >= level)
        np.add.at(out_t, rows, w_t[cols])
    if ledger is not None:
        ledger.add_sop(layer, int(s.sum(dtype=np.int64)) * P)
    return trap_release(out).astype(out_dtype)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(T, C, H, W) -> (T, H', W', C*kh*kw) patch matrix."""
    T, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (T, C, H', W', kh, kw)
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(T, Ho, Wo, C * kh * kw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"extent {size} incompatible with kernel {k}, stride {stride}, padding {padding}")
    return span // stride + 1


def _check_conv(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (T, C, H, W) input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"kernel shape {kernel.shape} does not fit input {x.shape}")
    conv_output_size(x.shape[2], kernel.shape[2], stride, padding)
    conv_output_size(x.shape[3], kernel.shape[3], stride, padding)


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None,
           ledger: EnergyLedger | None = None, layer: str = "conv") -> np.ndarray:
    """Float cross-correlation applied independently at every timestep.

    Charges ``ledger`` one MAC per kernel tap per output element.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _check_conv(x, kernel, stride, padding)
    O, C, kh, kw = kernel.shape
    cols = _im2col(x, kh, kw, stride, padding)
    # float64 accumulation, like matmul_float, so spike inputs agree with the add-only path
    out = np.tensordot(cols.astype(np.float64), kernel.reshape(O, -1).astype(np.float64), axes=([3], [1]))
    if bias is not None:
        out = out + np.asarray(bias)
    if ledger is not None:
        ledger.add_mac(layer, out.size * C * kh * kw)
    return out.transpose(0, 3, 1, 2).astype(_float_dtype(x, kernel))


def conv2d_addonly(spikes, kernel, stride: int = 1, padding: int = 0,
                   ledger: EnergyLedger | None = None, layer: str = "conv") -> np.ndarray:
    """Convolution of an integer spike map via :func:`matmul_addonly` on patches."""
    s = check_spikes(spikes)
    kernel = np.asarray(kernel)
    _check_conv(s, kernel, stride, padding)
    O = kernel.shape[0]
    cols = _im2col(s, kernel.shape[2], kernel.shape[3], stride, padding)
    T, Ho, Wo, K = cols.shape
    out = matmul_addonly(cols.reshape(-1, K), kernel.reshape(O, K).T, ledger, layer)
    return out.reshape(T, Ho, Wo, O).transpose(0, 3, 1, 2)


def maxpool2d(x, k: int = 2) -> np.ndarray:
    x = np.asarray(x)
    *lead, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"spatial extent {(H, W)} not divisible by pool size {k}")
    return x.reshape(*lead, H // k, k, W // k, k).max(axis=(-3, -1))


@dataclass
class BNParams:
    """Per-channel batch-norm affine plus running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BNParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference-time ``y = x * scale + shift`` per channel."""
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        return scale, self.beta - self.running_mean * scale


def _channel_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def batchnorm(x, stats: BNParams, mode: str = "infer", axis: int = -1) -> np.ndarray:
    """Batch normalisation over every axis except ``axis``.

    ``mode="train"`` normalises with batch statistics and updates the running
    estimates in ``stats`` (unbiased variance, exponential momentum).
    """
    x = np.asarray(x)
    axis = axis % x.ndim
    if x.shape[axis] != stats.channels:
        raise DimensionError(f"channel axis has {x.shape[axis]} entries, BN expects {stats.channels}")
    if mode == "train":
        red = tuple(i for i in range(x.ndim) if i != axis)
        n = x.size // x.shape[axis]
        mean = x.mean(axis=red)
        var = x.var(axis=red)
        unbiased = var * n / max(n - 1, 1)
        m = stats.momentum
        stats.running_mean[...] = (1 - m) * stats.running_mean + m * mean
        stats.running_var[...] = (1 - m) * stats.running_var + m * unbiased
        xhat = (x - _channel_view(mean, x.ndim, axis)) / np.sqrt(
            _channel_view(var, x.ndim, axis) + stats.eps)
        return xhat * _channel_view(stats.gamma, x.ndim, axis) + _channel_view(stats.beta, x.ndim, axis)
    if mode != "infer":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    scale, shift = stats.scale_shift()
    return x * _channel_view(scale, x.ndim, axis) + _channel_view(shift, x.ndim, axis)


def fold_batchnorm(weight, stats: BNParams, out_axis: int = -1, bias=None):
    """Fold an inference-mode BN into the preceding linear or conv weight.

    Linear weights are (in, out) so ``out_axis=-1``; conv kernels are
    (O, C, kh, kw) so ``out_axis=0``.  Returns ``(weight, bias)``.
    """
    w = np.asarray(weight)
    axis = out_axis % w.ndim
    if w.shape[axis] != stats.channels:
        raise DimensionError(f"weight output axis has {w.shape[axis]} entries, BN expects {stats.channels}")
    scale, shift = stats.scale_shift()
    folded = w * _channel_view(scale, w.ndim, axis)
    b = shift if bias is None else np.asarray(bias) * scale + shift
    return folded.astype(w.dtype), b.astype(w.dtype)


@dataclass
class Tensor:
    """Shape-checked float tensor (row-major) for serialisation boundaries."""

    shape: tuple[int, ...]
    elems: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if any(d < 1 for d in self.shape):
            raise DimensionError(f"dimensions must be >= 1, got {self.shape}")
        self.elems = np.ascontiguousarray(self.elems).reshape(-1)
        if self.elems.size != int(np.prod(self.shape)):
            raise DimensionError(f"buffer of {self.elems.size} elements does not match shape {self.shape}")

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr)
        return cls(arr.shape, arr)

    def to_array(self) -> np.ndarray:
        return self.elems.reshape(self.shape)
