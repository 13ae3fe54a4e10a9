"""Differentiable primitives over dense arrays.

Every learnable op comes as a pair: a forward function returning
``(output, cache)`` and a ``*_vjp`` function mapping ``(cache, upstream)`` to
input/parameter gradients. Sequence tensors are laid out ``[batch, time,
channels]``. Ops preserve the floating dtype they are given; the model runs in
float32 and gradient checks run in float64.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

DEBUG = os.environ.get("CONVHTR_DEBUG", "") not in ("", "0")

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-3
LN_EPSILON = 1e-3


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its shape contract."""


class DegenerateBatchError(ValueError):
    pass


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    if not DEBUG:
        return
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_length(t: int, stride: int) -> int:
    return -(-t // stride)


def conv_padding(t: int, kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """(left, right) zero padding for the same-padding regime.

    The left pad depends only on the kernel extent, so a frame's receptive
    field never moves when a sequence is right-padded to a wider batch.
    """
    t_out = conv_output_length(t, stride)
    extent = (kernel - 1) * dilation + 1
    left = (extent - 1) // 2
    right = max(0, (t_out - 1) * stride + extent - left - t)
    return left, right


@dataclass
class Conv1dCache:
    cols: np.ndarray  # [B, T', K, Cin]
    weight: np.ndarray
    input_shape: tuple[int, ...]
    pad: tuple[int, int]
    stride: int
    dilation: int


def _frame_index(t_out: int, kernel: int, stride: int, dilation: int) -> np.ndarray:
    return np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :] * dilation


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
           stride: int = 1, dilation: int = 1) -> tuple[np.ndarray, Conv1dCache]:
    """1D convolution along the time axis.

    ``x`` is ``[B, T, Cin]``, ``weight`` is ``[K, Cin, Cout]``; the output is
    ``[B, ceil(T / stride), Cout]``.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ContractError(f"conv1d expects 3D input and weight, got {x.shape}, {weight.shape}")
    b, t, c_in = x.shape
    k, w_in, c_out = weight.shape
    if w_in != c_in:
        raise ContractError(f"conv1d: input has {c_in} channels, weight expects {w_in}")
    if t == 0:
        raise ContractError("conv1d: empty sequence")
    if k < 1 or stride < 1 or dilation < 1:
        raise ContractError("conv1d: kernel, stride and dilation must be positive")
    if bias is not None and bias.shape != (c_out,):
        raise ContractError(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    t_out = conv_output_length(t, stride)
    left, right = conv_padding(t, k, stride, dilation)
    padded = np.pad(x, ((0, 0), (left, right), (0, 0)))
    cols = padded[:, _frame_index(t_out, k, stride, dilation), :]
    out = np.tensordot(cols, weight, axes=([2, 3], [0, 1]))
    if bias is not None:
        out += bias
    _check_finite("conv1d", out)
    return out, Conv1dCache(cols, weight, x.shape, (left, right), stride, dilation)


def conv1d_vjp(cache: Conv1dCache, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    b, t_out, k, c_in = cache.cols.shape
    if grad.shape != (b, t_out, cache.weight.shape[2]):
        raise ContractError(f"conv1d_vjp: upstream shape {grad.shape} does not match forward")
    grad_w = np.tensordot(cache.cols, grad, axes=([0, 1], [0, 1]))
    grad_b = grad.sum(axis=(0, 1))
    grad_cols = np.tensordot(grad, cache.weight, axes=([2], [2]))  # [B, T', K, Cin]

    left, right = cache.pad
    t = cache.input_shape[1]
    grad_padded = np.zeros((b, t + left + right, c_in), dtype=grad.dtype)
    span = (t_out - 1) * cache.stride + 1
    for j in range(k):
        start = j * cache.dilation
        grad_padded[:, start:start + span:cache.stride, :] += grad_cols[:, :, j, :]
    grad_x = grad_padded[:, left:left + t, :]
    _check_finite("conv1d_vjp", grad_x, grad_w)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class NormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple[int, ...]
    batch_stats: bool


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BatchNormState,
               mode: str = "train") -> tuple[np.ndarray, NormCache]:
    """Per-channel normalization over the batch and time axes.

    Train mode uses biased batch statistics and updates ``state`` in place;
    infer mode reads only the running statistics.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise ContractError(f"batch_norm: channel mismatch for input {x.shape}")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        n = x.size // c
        if n < 2:
            raise DegenerateBatchError("batch_norm: need at least 2 frames per channel in train mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    elif mode == "infer":
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    x_hat = (x - mean) * inv_std
    out = x_hat * gamma + beta
    _check_finite("batch_norm", out)
    return out, NormCache(x_hat, inv_std, gamma, axes, mode == "train")


def batch_norm_vjp(cache: NormCache, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    axes = cache.axes
    grad_gamma = (grad * cache.x_hat).sum(axis=axes)
    grad_beta = grad.sum(axis=axes)
    g_hat = grad * cache.gamma
    if not cache.batch_stats:
        return g_hat * cache.inv_std, grad_gamma, grad_beta
    n = grad.size // grad.shape[-1]
    grad_x = cache.inv_std / n * (
        n * g_hat - g_hat.sum(axis=axes) - cache.x_hat * (g_hat * cache.x_hat).sum(axis=axes))
    return grad_x, grad_gamma, grad_beta


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               epsilon: float = LN_EPSILON) -> tuple[np.ndarray, NormCache]:
    """Normalizes every frame over its channels."""
    c = x.shape[-1]
    if c < 1 or gamma.shape != (c,) or beta.shape != (c,):
        raise ContractError(f"layer_norm: channel mismatch for input {x.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x - mean) * inv_std
    return x_hat * gamma + beta, NormCache(x_hat, inv_std, gamma, (-1,), True)


def layer_norm_vjp(cache: NormCache, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lead = tuple(range(grad.ndim - 1))
    grad_gamma = (grad * cache.x_hat).sum(axis=lead)
    grad_beta = grad.sum(axis=lead)
    g_hat = grad * cache.gamma
    c = grad.shape[-1]
    grad_x = cache.inv_std / c * (
        c * g_hat - g_hat.sum(axis=-1, keepdims=True)
        - cache.x_hat * (g_hat * cache.x_hat).sum(axis=-1, keepdims=True))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# elementwise / dense
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0), x > 0


def relu_vjp(mask: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * mask


def sigmoid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_vjp(out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * out * (1 - out)


def activation(kind: str, x: np.ndarray) -> tuple[np.ndarray, tuple[str, np.ndarray]]:
    if kind == "relu":
        y, c = relu(x)
    elif kind == "sigmoid":
        y, c = sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y, (kind, c)


def activation_vjp(cache: tuple[str, np.ndarray], grad: np.ndarray) -> np.ndarray:
    kind, c = cache
    return relu_vjp(c, grad) if kind == "relu" else sigmoid_vjp(c, grad)


def log_softmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-softmax over the last axis. The cache is the output itself."""
    if x.shape[-1] < 1:
        raise ContractError("log_softmax: empty class axis")
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return out, out


def log_softmax_vjp(out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad - np.exp(out) * grad.sum(axis=-1, keepdims=True)


def fully_connected(x: np.ndarray, weight: np.ndarray,
                    bias: np.ndarray | None) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ContractError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out, (x, weight)


def fully_connected_vjp(cache: tuple[np.ndarray, np.ndarray],
                        grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weight = cache
    lead = tuple(range(grad.ndim - 1))
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    return grad @ weight.T, x2.T @ g2, grad.sum(axis=lead)


def length_mask(lengths, t: int, dtype=np.float32) -> np.ndarray:
    """``[B, T, 1]`` mask, 1 on the first ``lengths[b]`` frames."""
    lengths = np.asarray(lengths)
    return (np.arange(t)[None, :] < lengths[:, None]).astype(dtype)[:, :, None]


def global_average_pool(x: np.ndarray, lengths) -> tuple[np.ndarray, tuple]:
    """Mean over the first ``lengths[b]`` frames of each sequence."""
    b, t, _ = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (b,):
        raise ContractError(f"global_average_pool: expected {b} lengths, got {lengths.shape}")
    if np.any(lengths < 1) or np.any(lengths > t):
        raise ContractError(f"global_average_pool: lengths must lie in [1, {t}]")
    mask = length_mask(lengths, t, x.dtype)
    denom = lengths.astype(x.dtype)[:, None]
    return (x * mask).sum(axis=1) / denom, (mask, denom)


def global_average_pool_vjp(cache: tuple, grad: np.ndarray) -> np.ndarray:
    mask, denom = cache
    return mask * (grad / denom)[:, None, :]


def dropout(x: np.ndarray, rate: float, mode: str,
            rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout; the returned mask (already scaled) drives the VJP."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_vjp(mask: np.ndarray | None, grad: np.ndarray) -> np.ndarray:
    return grad if mask is None else grad * mask


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

GradFn = Callable[[Mapping[str, np.ndarray]], tuple[np.ndarray, Callable[[np.ndarray], Mapping[str, np.ndarray]]]]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a| + |n|, floor)`` in the L2 norm; the floor keeps
    gradients that are zero on both sides from reading as large errors."""
    num = float(np.linalg.norm(analytic - numeric))
    den = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return num / max(den, floor)


def grad_check(fn: GradFn, inputs: Mapping[str, np.ndarray], step: float = 1e-3,
               seed: int = 0, upstream: np.ndarray | None = None) -> float:
    """Compares a VJP against central differences of ``sum(out * upstream)``.

    ``fn`` maps a dict of arrays to ``(output, backward)`` where
    ``backward(upstream)`` returns gradients keyed like ``inputs`` (missing
    keys are skipped). Inputs are promoted to float64. Returns the worst
    per-tensor relative error ``|a - n| / (|a| + |n|)`` in the L2 norm.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out, backward = fn(point)
    if upstream is None:
        upstream = np.random.default_rng(seed).standard_normal(np.shape(out))
    analytic = backward(upstream)

    worst = 0.0
    for name, value in point.items():
        if name not in analytic:
            continue
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = float(np.sum(fn(point)[0] * upstream))
            flat[i] = orig - step
            minus = float(np.sum(fn(point)[0] * upstream))
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
        worst = max(worst, relative_error(np.asarray(analytic[name], dtype=np.float64), numeric))
    return worst


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)

