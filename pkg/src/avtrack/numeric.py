"""Dense-tensor operations with the hand-written backward passes the model needs.

Tensors are plain ``numpy.ndarray`` values, float64 unless a caller opts into
float32.  Forward convolutions and reductions use a fixed summation order so
that the nested-loop oracles in the test suite are bit-comparable: the
convolution kernels live in :mod:`avtrack.backend`, and normalisation
statistics are accumulated with ``np.cumsum`` (strictly sequential, channel
innermost) instead of ``np.sum`` (pairwise).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from avtrack import backend

INF = math.inf
NORM_EPS = 1e-5
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class NumericalError(FloatingPointError):
    """Raised when a non-finite value appears where the contract forbids it."""


# ---------------------------------------------------------------------------
# seeding


def derive_seed(seed: int, *purpose) -> int:
    """64-bit sub-seed from ``seed`` and a purpose tag.

    SHA-256 over the decimal seed and the ``/``-joined purpose parts, first
    eight bytes read little-endian.  Platform independent.
    """
    tag = "/".join(str(p) for p in purpose)
    digest = hashlib.sha256(f"{int(seed)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *purpose) -> np.random.Generator:
    """PCG64 generator; with a purpose tag the seed goes through :func:`derive_seed`."""
    if purpose:
        seed = derive_seed(seed, *purpose)
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# parameters and optimiser


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update over every non-frozen parameter."""
    for p in params:
        if p.frozen:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {p.name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.frozen:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        backend.active.adam_update(p.value.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                                   lr, state.beta1, state.beta2, c1, c2, state.eps)


# ---------------------------------------------------------------------------
# convolutions and pooling


def _float_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float64)


def conv1d(x, kernel, bias):
    """Time convolution with SAME padding: ``[B,T,Cin] * [K,Cin,Cout] -> [B,T,Cout]``."""
    if x.ndim != 3 or kernel.ndim != 3 or bias.ndim != 1:
        raise ShapeError(f"conv1d expects x[B,T,Cin], kernel[K,Cin,Cout], bias[Cout]; got "
                         f"{x.shape}, {kernel.shape}, {bias.shape}")
    K, cin, cout = kernel.shape
    if K % 2 != 1:
        raise ShapeError(f"conv1d kernel length K={K} must be odd")
    if x.shape[2] != cin:
        raise ShapeError(f"conv1d input channels Cin: input has {x.shape[2]}, kernel expects {cin}")
    if bias.shape[0] != cout:
        raise ShapeError(f"conv1d output channels Cout: kernel has {cout}, bias has {bias.shape[0]}")
    dt = _float_dtype(x, kernel, bias)
    x, kernel, bias = (np.ascontiguousarray(a, dtype=dt) for a in (x, kernel, bias))
    out = np.empty(x.shape[:2] + (cout,), dtype=dt)
    backend.active.conv1d_forward(x, kernel, bias, out)
    return out


def conv1d_backward(x, kernel, grad_out):
    """Gradients of :func:`conv1d` w.r.t. input, kernel and bias."""
    K, cin, cout = kernel.shape
    pad = K // 2
    B, T, _ = x.shape
    gp = np.pad(grad_out, ((0, 0), (pad, pad), (0, 0)))
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    gx = np.zeros_like(x)
    for k in range(K):
        gx += gp[:, 2 * pad - k:2 * pad - k + T] @ kernel[k].T
    cols = np.stack([xp[:, k:k + T] for k in range(K)], axis=2)  # [B,T,K,Cin]
    gk = (cols.reshape(B * T, K * cin).T @ grad_out.reshape(B * T, cout)).reshape(K, cin, cout)
    gb = grad_out.sum(axis=(0, 1))
    return gx, gk, gb


def conv3d_output_size(size: int, stride: int, extent: int = 3) -> int:
    return (size - extent) // stride + 1


def conv3d(x, kernel, bias, stride: int = 1):
    """3D convolution over ``[B,T,H,W,Cin]``; SAME in time, VALID in space, stride ``(1,s,s)``."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects x[B,T,H,W,Cin] and kernel[KT,KH,KW,Cin,Cout]; got {x.shape}, {kernel.shape}")
    KT, KH, KW, cin, cout = kernel.shape
    if KT % 2 != 1:
        raise ShapeError(f"conv3d time extent KT={KT} must be odd")
    if stride not in (1, 2):
        raise ShapeError(f"conv3d spatial stride must be 1 or 2, got {stride}")
    B, T, H, W, c = x.shape
    if c != cin:
        raise ShapeError(f"conv3d input channels Cin: input has {c}, kernel expects {cin}")
    if H < KH or W < KW:
        raise ShapeError(f"conv3d spatial dims {H}x{W} smaller than kernel extent {KH}x{KW}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d bias must have shape ({cout},), got {bias.shape}")
    Ho, Wo = conv3d_output_size(H, stride, KH), conv3d_output_size(W, stride, KW)
    dt = _float_dtype(x, kernel, bias)
    x, kernel, bias = (np.ascontiguousarray(a, dtype=dt) for a in (x, kernel, bias))
    out = np.empty((B, T, Ho, Wo, cout), dtype=dt)
    backend.active.conv3d_forward(x, kernel, bias, stride, out)
    return out


def maxpool_spatial(x):
    """2x2 spatial max pool on ``[B,T,H,W,C]``; a trailing odd row/column is dropped."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool_spatial expects [B,T,H,W,C], got {x.shape}")
    B, T, H, W, C = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool_spatial needs H, W >= 2, got {H}x{W}")
    h, w = H // 2, W // 2
    v = x[:, :, :2 * h, :2 * w].reshape(B, T, h, 2, w, 2, C)
    return v.max(axis=(3, 5))


def relu(x):
    return np.maximum(x, 0)


# ---------------------------------------------------------------------------
# normalisation


def seq_sum(x, axis):
    """Sum along ``axis`` in strictly ascending index order."""
    return np.cumsum(x, axis=axis).take(-1, axis=axis)


def group_norm(x, groups: int = 32, scale=None, shift=None, eps: float = NORM_EPS):
    """Group normalisation over ``[B, T, *spatial, C]``.

    Statistics are per (sample, time step, group) and pool the group's
    channels together with all spatial positions, channel index innermost.
    """
    C = x.shape[-1]
    if groups <= 0 or C % groups:
        raise ShapeError(f"group_norm: channels C={C} not divisible by groups={groups}")
    lead = x.shape[:2]
    g = x.reshape(lead + (-1, groups, C // groups)).transpose(0, 1, 3, 2, 4)
    flat = g.reshape(lead + (groups, -1))
    n = flat.shape[-1]
    mean = seq_sum(flat, -1) / n
    centered = flat - mean[..., None]
    var = seq_sum(centered * centered, -1) / n
    normed = centered / np.sqrt(var + eps)[..., None]
    y = normed.reshape(g.shape).transpose(0, 1, 3, 2, 4).reshape(x.shape)
    if scale is not None:
        y = y * scale
    if shift is not None:
        y = y + shift
    return y


@dataclass
class BatchNormState:
    """Running statistics; ``None`` means never initialised."""

    mean: np.ndarray = None
    var: np.ndarray = None
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batch_norm(x, state: BatchNormState, mode: str = "train", gamma=None, beta=None,
               eps: float = NORM_EPS, return_cache: bool = False):
    """Batch normalisation of ``[B,T,C]`` over the (B,T) positions per channel.

    Train mode normalises with the batch statistics (biased variance) and
    updates ``state`` in place: ``running = momentum*running + (1-momentum)*batch``.
    Infer mode uses the running statistics.

    Batch statistics sum each channel's values in sorted order, so they do not
    depend on the order of the batch elements.
    """
    if x.ndim != 3:
        raise ShapeError(f"batch_norm expects [B,T,C], got {x.shape}")
    C = x.shape[2]
    if mode == "train":
        n = x.shape[0] * x.shape[1]
        if n < 2:
            raise ShapeError(f"batch_norm train mode needs B*T >= 2, got {n}")
        flat = x.reshape(n, C)
        mean = seq_sum(np.sort(flat, axis=0), 0) / n
        centered = flat - mean
        var = seq_sum(np.sort(centered * centered, axis=0), 0) / n
        if state is not None:
            if state.mean is None:
                state.mean, state.var = mean.copy(), var.copy()
            else:
                state.mean = state.momentum * state.mean + (1.0 - state.momentum) * mean
                state.var = state.momentum * state.var + (1.0 - state.momentum) * var
    elif mode == "infer":
        if state is None or state.mean is None or state.var is None:
            raise ValueError("batch_norm infer mode requires initialised running statistics")
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    if return_cache:
        return y, (mode, xhat, inv_std, gamma)
    return y


def batch_norm_backward(cache, grad_out):
    """Gradients (input, gamma, beta) of :func:`batch_norm` given its cache."""
    mode, xhat, inv_std, gamma = cache
    C = grad_out.shape[-1]
    g2 = grad_out.reshape(-1, C)
    xh = xhat.reshape(-1, C)
    ggamma = (g2 * xh).sum(0)
    gbeta = g2.sum(0)
    gy = g2 * gamma if gamma is not None else g2
    if mode == "infer":
        gx = gy * inv_std
    else:
        n = g2.shape[0]
        gx = (inv_std / n) * (n * gy - gy.sum(0) - xh * (gy * xh).sum(0))
    return gx.reshape(grad_out.shape), ggamma, gbeta


# ---------------------------------------------------------------------------
# softmax


def softmax_axis(x, axis: int = -1, beta: float = 1.0):
    """Softmax with inverse temperature ``beta`` along ``axis``.

    ``beta == 0`` gives exactly uniform weights, ``beta == INF`` a one-hot
    vector at the argmax (lowest index on ties).  The normaliser is summed
    over the sorted terms, so the result does not depend on the order of the
    entries along ``axis``.
    """
    x = np.asarray(x, dtype=_float_dtype(x))
    if not np.all(np.isfinite(x)):
        raise NumericalError("softmax_axis: non-finite input")
    if not (beta >= 0):
        raise ValueError(f"softmax_axis: beta must be nonnegative or INF, got {beta}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if beta == 0:
        return np.full(x.shape, 1.0 / n, dtype=x.dtype)
    if math.isinf(beta):
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.zeros_like(x)
        np.put_along_axis(out, idx, 1.0, axis=axis)
        return out
    z = beta * x
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    total = seq_sum(np.sort(e, axis=axis), axis)
    return e / np.expand_dims(total, axis)


def softmax_backward(alpha, grad_alpha, axis: int = -1, beta: float = 1.0):
    """Vector-Jacobian product of :func:`softmax_axis` for finite ``beta``."""
    inner = (grad_alpha * alpha).sum(axis=axis, keepdims=True)
    return beta * alpha * (grad_alpha - inner)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f, x, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is left unchanged)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: non-finite f near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def tensor_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """``max |a - n|`` relative to the larger of the two tensors' peak magnitudes.

    Unlike :func:`max_rel_error`, a component far below the tensor's scale is
    judged against that scale, so finite-difference roundoff on it cannot
    dominate.  ``floor`` guards tensors whose gradient is zero throughout.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale
