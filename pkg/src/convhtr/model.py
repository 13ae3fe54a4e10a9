"""Declarative network config, parameter allocation and the end-to-end
forward/backward pass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import layers as L
from . import numerics as nx

BLOCK_TYPES = ("A", "B", "C")
RESIDUAL_MODES = ("none", "normal", "dense")
NORMALIZATIONS = ("batch", "layer", "none")


class ConfigError(ValueError):
    pass


class StaleContextError(RuntimeError):
    pass


@dataclass
class BlockSpec:
    block_type: str
    out_channels: int
    kernel: int
    conv_layers: int = 1
    stride: int = 1
    dilation: int = 1
    dropout: float = 0.0
    residual: str = "none"
    se: bool = False


@dataclass
class ModelConfig:
    input_height: int
    vocab_size: int
    blocks: list[BlockSpec]
    normalization: str = "batch"
    seed: int = 0

    @property
    def blank(self) -> int:
        return self.vocab_size - 1

    @property
    def downsampling(self) -> int:
        factor = 1
        for b in self.blocks:
            factor *= b.stride
        return factor

    def validate(self) -> None:
        if self.input_height < 1:
            raise ConfigError("input_height must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (at least one symbol plus blank)")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
        if not self.blocks:
            raise ConfigError("blocks must not be empty")
        types = [b.block_type for b in self.blocks]
        if types.count("C") != 1 or types[-1] != "C":
            raise ConfigError("exactly one type-C block is required, and it must be last")
        for i, b in enumerate(self.blocks, 1):
            where = f"block B{i}"
            if b.block_type not in BLOCK_TYPES:
                raise ConfigError(f"{where}: block_type must be one of {BLOCK_TYPES}")
            if b.out_channels < 1 or b.kernel < 1 or b.stride < 1 or b.dilation < 1 or b.conv_layers < 1:
                raise ConfigError(f"{where}: channels, kernel, stride, dilation and conv_layers must be positive")
            if not 0.0 <= b.dropout < 1.0:
                raise ConfigError(f"{where}: dropout must lie in [0, 1)")
            if b.residual not in RESIDUAL_MODES:
                raise ConfigError(f"{where}: residual must be one of {RESIDUAL_MODES}")
            if b.block_type == "B" and b.stride != 1:
                raise ConfigError(f"{where}: type-B blocks must have stride 1")
            if b.block_type != "B" and (b.residual != "none" or b.se):
                raise ConfigError(f"{where}: residual connections and SE are only valid on type-B blocks")
            if b.block_type != "B" and b.conv_layers != 1:
                raise ConfigError(f"{where}: only type-B blocks repeat conv layers")
            if b.block_type == "C" and b.out_channels != self.vocab_size:
                raise ConfigError(f"{where}: type-C output channels must equal vocab_size")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        if not isinstance(data, dict):
            raise ConfigError("model config must be a JSON object")
        if "preset" in data:
            return _from_preset(data)
        _reject_unknown(data, {f.name for f in fields(cls)}, "model config")
        for key in ("input_height", "vocab_size", "blocks"):
            if key not in data:
                raise ConfigError(f"model config: missing key {key!r}")
        blocks = []
        names = {f.name for f in fields(BlockSpec)}
        for i, b in enumerate(data["blocks"], 1):
            if not isinstance(b, dict):
                raise ConfigError(f"blocks[{i - 1}] must be an object")
            _reject_unknown(b, names, f"blocks[{i - 1}]")
            try:
                blocks.append(BlockSpec(**b))
            except TypeError as exc:
                raise ConfigError(f"blocks[{i - 1}]: {exc}") from None
        cfg = cls(input_height=data["input_height"], vocab_size=data["vocab_size"], blocks=blocks,
                  normalization=data.get("normalization", "batch"), seed=data.get("seed", 0))
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


PRESET_KEYS = {"preset", "input_height", "vocab_size", "residual", "se", "normalization", "seed"}


def _from_preset(data: dict) -> ModelConfig:
    _reject_unknown(data, PRESET_KEYS, "model config")
    if data["preset"] != "canonical":
        raise ConfigError(f"unknown preset {data['preset']!r}")
    kwargs = {k: v for k, v in data.items() if k != "preset"}
    cfg = canonical_config(**kwargs)
    cfg.validate()
    return cfg


def canonical_config(input_height: int = 80, vocab_size: int = 80, residual: str = "dense",
                     se: bool = True, normalization: str = "batch", seed: int = 0) -> ModelConfig:
    """The 8-block / 14-conv-layer network; ablation switches apply to B3-B5."""
    def b(kernel, dropout):
        return BlockSpec("B", 256, kernel, conv_layers=3, dropout=dropout, residual=residual, se=se)

    blocks = [
        BlockSpec("A", 128, 3, stride=2, dropout=0.2),
        BlockSpec("A", 128, 3, stride=2, dropout=0.2),
        b(5, 0.2),
        b(7, 0.2),
        b(9, 0.3),
        BlockSpec("A", 512, 11, dilation=2, dropout=0.4),
        BlockSpec("A", 512, 1, dropout=0.4),
        BlockSpec("C", vocab_size, 1),
    ]
    return ModelConfig(input_height, vocab_size, blocks, normalization, seed)


def residual_sources(config: ModelConfig) -> list[list[int]]:
    """For each block, indices of the block inputs it receives as residuals.

    Input of block ``i`` is the tensor ``h[i]`` (``h[0]`` being the images).
    Dense mode: every type-B input seen so far, this block's own included.
    Normal mode: only the block's own input.
    """
    seen: list[int] = []
    out: list[list[int]] = []
    for i, spec in enumerate(config.blocks):
        if spec.block_type != "B":
            out.append([])
            continue
        seen.append(i)
        if spec.residual == "dense":
            out.append(list(seen))
        elif spec.residual == "normal":
            out.append([i])
        else:
            out.append([])
    return out


@dataclass
class Model:
    config: ModelConfig
    blocks: list
    version: int = 0
    _sources: list[list[int]] = field(default_factory=list, repr=False)

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks, 1):
            params.update({f"B{i}.{k}": v for k, v in block.parameters().items()})
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks, 1):
            if hasattr(block, "buffers"):
                bufs.update({f"B{i}.{k}": v for k, v in block.buffers().items()})
        return bufs

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.parameters()
        state.update(self.buffers())
        return state

    def mark_updated(self) -> None:
        self.version += 1


def build(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    norm = config.normalization
    sources = residual_sources(config)
    channels = [config.input_height]
    blocks = []
    for i, spec in enumerate(config.blocks):
        c_in = channels[-1]
        c_out = spec.out_channels
        if spec.block_type == "A":
            unit = L.ConvNorm.init(rng, spec.kernel, c_in, c_out, norm, spec.stride, spec.dilation)
            blocks.append(L.BlockAParams(unit, spec.dropout))
        elif spec.block_type == "B":
            subs = []
            for r in range(spec.conv_layers):
                subs.append(L.ConvNorm.init(rng, spec.kernel, c_in if r == 0 else c_out, c_out, norm,
                                            1, spec.dilation))
            se = L.SeParams.init(c_out, rng) if spec.se else None
            residuals = [L.ConvNorm.init(rng, 1, channels[j], c_out, norm) for j in sources[i]]
            blocks.append(L.BlockBParams(subs, se, residuals, spec.dropout))
        else:
            weight = nx.he_normal(rng, (spec.kernel, c_in, c_out), spec.kernel * c_in)
            blocks.append(L.BlockCParams(weight, np.zeros(c_out, np.float32)))
        channels.append(c_out)
    return Model(config, blocks, _sources=sources)


def count_params(model: Model) -> int:
    """Trainable parameter count; running statistics are excluded."""
    return int(sum(p.size for p in model.parameters().values()))


def output_lengths(widths, downsampling: int) -> np.ndarray:
    return -(-np.asarray(widths, dtype=np.int64) // downsampling)


@dataclass
class ForwardContext:
    version: int
    caches: list
    lengths: list[np.ndarray]


def forward(model: Model, images: np.ndarray, widths, mode: str = "infer",
            rng: np.random.Generator | None = None):
    """Runs ``[B, W, H]`` images to raw logits ``[B, ceil(W/4), V]``.

    Returns ``(logits, out_lengths, context)``; ``context`` feeds
    :func:`backward`.
    """
    cfg = model.config
    if images.ndim != 3 or images.shape[2] != cfg.input_height:
        raise nx.ContractError(f"expected images [B, W, {cfg.input_height}], got {images.shape}")
    widths = np.asarray(widths, dtype=np.int64)
    if widths.shape != (images.shape[0],) or np.any(widths < 1) or np.any(widths > images.shape[1]):
        raise nx.ContractError("widths must be one value in [1, W] per image")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)

    h = [images * nx.length_mask(widths, images.shape[1], images.dtype)]
    lengths = [widths]
    caches = []
    for i, (spec, block) in enumerate(zip(cfg.blocks, model.blocks)):
        x = h[-1]
        if spec.block_type == "A":
            y, new_len, cache = L.block_a_forward(x, lengths[-1], block, mode, rng)
        elif spec.block_type == "B":
            srcs = [h[j] for j in model._sources[i]]
            y, cache = L.block_b_forward(x, lengths[-1], srcs, block, mode, rng)
            new_len = lengths[-1]
        else:
            y, cache = L.block_c_forward(x, block)
            new_len = lengths[-1]
        h.append(y)
        lengths.append(new_len)
        caches.append(cache)
    return h[-1], lengths[-1], ForwardContext(model.version, caches, lengths)


def backward(model: Model, ctx: ForwardContext, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every parameter, keyed like :meth:`Model.parameters`."""
    if ctx.version != model.version:
        raise StaleContextError("forward context predates the latest parameter update")
    cfg = model.config
    n = len(cfg.blocks)
    pending: dict[int, np.ndarray] = {n: grad_logits}
    grads: dict[str, np.ndarray] = {}

    def accumulate(idx: int, g: np.ndarray) -> None:
        pending[idx] = pending[idx] + g if idx in pending else g

    for i in range(n - 1, -1, -1):
        spec, block, cache = cfg.blocks[i], model.blocks[i], ctx.caches[i]
        g = pending.pop(i + 1)
        if spec.block_type == "A":
            gx, local = L.block_a_backward(cache, block, g)
        elif spec.block_type == "B":
            gx, g_src, local = L.block_b_backward(cache, block, g)
            for j, gs in zip(model._sources[i], g_src):
                accumulate(j, gs)
        else:
            gx, local = L.block_c_backward(cache, g)
        accumulate(i, gx)
        grads.update({f"B{i + 1}.{k}": v for k, v in local.items()})
    return grads


def _cast(obj, dtype):
    if isinstance(obj, np.ndarray):
        return obj.astype(dtype)
    if isinstance(obj, list):
        return [_cast(o, dtype) for o in obj]
    if hasattr(obj, "__dataclass_fields__"):
        changes = {f.name: _cast(getattr(obj, f.name), dtype) for f in fields(obj)
                   if f.name not in ("config", "_sources")}
        return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **changes})
    return obj


def cast_model(model: Model, dtype) -> Model:
    """Deep copy with every parameter and running statistic in ``dtype``."""
    return _cast(model, dtype)
