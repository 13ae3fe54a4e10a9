"""Composite blocks: type-A conv block, 1D squeeze-and-excitation, type-B
repeated block with residual merge, type-C output head.

Block outputs are zeroed past each sequence's true length, so downstream
convolutions see the same zeros a shorter batch would have padded with.
Backward functions return gradients keyed by local parameter names
(``"conv.weight"``, ``"sub1.norm.gamma"``, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, ContractError


@dataclass
class Norm:
    """A normalization site; ``kind`` is ``batch``, ``layer`` or ``none``."""

    kind: str
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    state: BatchNormState | None = None

    @classmethod
    def create(cls, kind: str, channels: int) -> "Norm":
        if kind == "none":
            return cls(kind)
        if kind not in ("batch", "layer"):
            raise ValueError(f"unknown normalization {kind!r}")
        state = BatchNormState.fresh(channels) if kind == "batch" else None
        return cls(kind, np.ones(channels, np.float32), np.zeros(channels, np.float32), state)

    def parameters(self) -> dict[str, np.ndarray]:
        if self.kind == "none":
            return {}
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.state is None:
            return {}
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}


def norm_forward(x: np.ndarray, norm: Norm, mode: str):
    if norm.kind == "batch":
        return nx.batch_norm(x, norm.gamma, norm.beta, norm.state, mode)
    if norm.kind == "layer":
        return nx.layer_norm(x, norm.gamma, norm.beta)
    return x, None


def norm_vjp(norm: Norm, cache, grad: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    if norm.kind == "batch":
        gx, gg, gb = nx.batch_norm_vjp(cache, grad)
    elif norm.kind == "layer":
        gx, gg, gb = nx.layer_norm_vjp(cache, grad)
    else:
        return grad, {}
    return gx, {"gamma": gg, "beta": gb}


def _prefixed(prefix: str, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


# ---------------------------------------------------------------------------
# squeeze-and-excitation
# ---------------------------------------------------------------------------


def se_bottleneck(channels: int) -> int:
    return max(1, channels // 8)


@dataclass
class SeParams:
    w1: np.ndarray  # [C, C/8]
    b1: np.ndarray
    w2: np.ndarray  # [C/8, C]
    b2: np.ndarray

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "SeParams":
        mid = se_bottleneck(channels)
        return cls(nx.he_normal(rng, (channels, mid), channels), np.zeros(mid, np.float32),
                   nx.he_normal(rng, (mid, channels), mid), np.zeros(channels, np.float32))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def se_forward(x: np.ndarray, p: SeParams, lengths) -> tuple[np.ndarray, tuple]:
    """Rescales channels by a gate computed from the length-masked time mean."""
    if x.shape[-1] != p.w1.shape[0]:
        raise ContractError(f"se_forward: {x.shape[-1]} channels, params expect {p.w1.shape[0]}")
    pooled, c_pool = nx.global_average_pool(x, lengths)
    h, c_fc1 = nx.fully_connected(pooled, p.w1, p.b1)
    h, c_relu = nx.relu(h)
    h, c_fc2 = nx.fully_connected(h, p.w2, p.b2)
    context, c_sig = nx.sigmoid(h)
    out = x * context[:, None, :]
    return out, (x, context, c_pool, c_fc1, c_relu, c_fc2, c_sig)


def se_vjp(cache: tuple, grad: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, context, c_pool, c_fc1, c_relu, c_fc2, c_sig = cache
    g_context = (grad * x).sum(axis=1)
    g = nx.sigmoid_vjp(c_sig, g_context)
    g, gw2, gb2 = nx.fully_connected_vjp(c_fc2, g)
    g = nx.relu_vjp(c_relu, g)
    g, gw1, gb1 = nx.fully_connected_vjp(c_fc1, g)
    gx = grad * context[:, None, :] + nx.global_average_pool_vjp(c_pool, g)
    return gx, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


# ---------------------------------------------------------------------------
# conv + norm units
# ---------------------------------------------------------------------------


@dataclass
class ConvNorm:
    """Convolution followed by a normalization site."""

    weight: np.ndarray  # [K, Cin, Cout]
    bias: np.ndarray
    norm: Norm
    stride: int = 1
    dilation: int = 1

    @classmethod
    def init(cls, rng, kernel: int, c_in: int, c_out: int, norm: str,
             stride: int = 1, dilation: int = 1) -> "ConvNorm":
        weight = nx.he_normal(rng, (kernel, c_in, c_out), kernel * c_in)
        return cls(weight, np.zeros(c_out, np.float32), Norm.create(norm, c_out), stride, dilation)

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"conv.weight": self.weight, "conv.bias": self.bias}
        params.update(_prefixed("norm", self.norm.parameters()))
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return _prefixed("norm", self.norm.buffers())

    def forward(self, x: np.ndarray, mode: str):
        y, c_conv = nx.conv1d(x, self.weight, self.bias, self.stride, self.dilation)
        y, c_norm = norm_forward(y, self.norm, mode)
        return y, (c_conv, c_norm)

    def backward(self, cache, grad: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        c_conv, c_norm = cache
        g, grads = norm_vjp(self.norm, c_norm, grad)
        gx, gw, gb = nx.conv1d_vjp(c_conv, g)
        out = {"conv.weight": gw, "conv.bias": gb}
        out.update(_prefixed("norm", grads))
        return gx, out


@dataclass
class BlockAParams:
    unit: ConvNorm
    dropout: float = 0.0

    @property
    def stride(self) -> int:
        return self.unit.stride

    @property
    def dilation(self) -> int:
        return self.unit.dilation

    @property
    def kernel(self) -> int:
        return self.unit.kernel

    def parameters(self) -> dict[str, np.ndarray]:
        return self.unit.parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.unit.buffers()


def block_a_forward(x: np.ndarray, lengths, p: BlockAParams, mode: str,
                    rng: np.random.Generator | None):
    """conv -> norm -> ReLU -> dropout, then zero frames past each length.

    Returns ``(y, new_lengths, cache)``.
    """
    new_lengths = -(-np.asarray(lengths, dtype=np.int64) // p.stride)
    y, c_unit = p.unit.forward(x, mode)
    y, c_relu = nx.relu(y)
    y, c_drop = nx.dropout(y, p.dropout, mode, rng)
    mask = nx.length_mask(new_lengths, y.shape[1], y.dtype)
    return y * mask, new_lengths, (c_unit, c_relu, c_drop, mask)


def block_a_backward(cache, p: BlockAParams, grad: np.ndarray):
    c_unit, c_relu, c_drop, mask = cache
    g = nx.dropout_vjp(c_drop, grad * mask)
    g = nx.relu_vjp(c_relu, g)
    return p.unit.backward(c_unit, g)


# ---------------------------------------------------------------------------
# type-B block
# ---------------------------------------------------------------------------


@dataclass
class BlockBParams:
    subs: list[ConvNorm]
    se: SeParams | None = None
    residuals: list[ConvNorm] = field(default_factory=list)
    dropout: float = 0.0

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for r, sub in enumerate(self.subs):
            params.update(_prefixed(f"sub{r}", sub.parameters()))
        if self.se is not None:
            params.update(_prefixed("se", self.se.parameters()))
        for j, res in enumerate(self.residuals):
            params.update(_prefixed(f"res{j}", res.parameters()))
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for r, sub in enumerate(self.subs):
            bufs.update(_prefixed(f"sub{r}", sub.buffers()))
        for j, res in enumerate(self.residuals):
            bufs.update(_prefixed(f"res{j}", res.buffers()))
        return bufs


def block_b_forward(x: np.ndarray, lengths, sources: list[np.ndarray], p: BlockBParams,
                    mode: str, rng: np.random.Generator | None):
    """R stride-1 conv units; the last one gets SE and the residual sum.

    Every residual source passes through its own 1x1 conv + norm and is added
    after SE, before the final ReLU and dropout. Returns ``(y, cache)``.
    """
    if len(sources) != len(p.residuals):
        raise ContractError(f"block_b: {len(sources)} residual sources for {len(p.residuals)} projections")
    t = x.shape[1]
    mask = nx.length_mask(lengths, t, x.dtype)
    caches = []
    h = x
    for sub in p.subs[:-1]:
        h, c_unit = sub.forward(h, mode)
        h, c_relu = nx.relu(h)
        h, c_drop = nx.dropout(h, p.dropout, mode, rng)
        h = h * mask
        caches.append((c_unit, c_relu, c_drop))

    h, c_last = p.subs[-1].forward(h, mode)
    c_se = None
    if p.se is not None:
        h, c_se = se_forward(h, p.se, lengths)
    c_res = []
    for src, proj in zip(sources, p.residuals):
        if src.shape[:2] != x.shape[:2]:
            raise ContractError(f"block_b: residual source {src.shape} does not match input {x.shape}")
        if src.shape[2] != proj.weight.shape[1]:
            raise ContractError(f"block_b: residual source has {src.shape[2]} channels, "
                                f"projection expects {proj.weight.shape[1]}")
        r, c = proj.forward(src, mode)
        h = h + r
        c_res.append(c)
    h, c_relu = nx.relu(h)
    h, c_drop = nx.dropout(h, p.dropout, mode, rng)
    y = h * mask
    if y.shape[1] != t:
        raise AssertionError("type-B blocks must preserve sequence length")
    return y, (caches, c_last, c_se, c_res, c_relu, c_drop, mask)


def block_b_backward(cache, p: BlockBParams, grad: np.ndarray):
    """Returns ``(grad_input, grad_sources, grads)``."""
    caches, c_last, c_se, c_res, c_relu, c_drop, mask = cache
    grads: dict[str, np.ndarray] = {}
    g = nx.dropout_vjp(c_drop, grad * mask)
    g = nx.relu_vjp(c_relu, g)

    grad_sources = []
    for j, (proj, c) in enumerate(zip(p.residuals, c_res)):
        gs, pg = proj.backward(c, g)
        grad_sources.append(gs)
        grads.update(_prefixed(f"res{j}", pg))
    if p.se is not None:
        g, sg = se_vjp(c_se, g)
        grads.update(_prefixed("se", sg))
    last = len(p.subs) - 1
    g, ug = p.subs[last].backward(c_last, g)
    grads.update(_prefixed(f"sub{last}", ug))

    for r in range(last - 1, -1, -1):
        c_unit, c_relu_r, c_drop_r = caches[r]
        g = nx.dropout_vjp(c_drop_r, g * mask)
        g = nx.relu_vjp(c_relu_r, g)
        g, ug = p.subs[r].backward(c_unit, g)
        grads.update(_prefixed(f"sub{r}", ug))
    return g, grad_sources, grads


# ---------------------------------------------------------------------------
# type-C head
# ---------------------------------------------------------------------------


@dataclass
class BlockCParams:
    weight: np.ndarray  # [K, Cin, V]
    bias: np.ndarray

    def parameters(self) -> dict[str, np.ndarray]:
        return {"conv.weight": self.weight, "conv.bias": self.bias}


def block_c_forward(x: np.ndarray, p: BlockCParams):
    """Raw per-frame logits; log-softmax is left to the loss."""
    return nx.conv1d(x, p.weight, p.bias)


def block_c_backward(cache, grad: np.ndarray):
    gx, gw, gb = nx.conv1d_vjp(cache, grad)
    return gx, {"conv.weight": gw, "conv.bias": gb}
