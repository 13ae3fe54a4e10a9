"""Adam training loop with early stopping on validation CER, checkpointing
and JSON-lines metrics."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import ctc
from .augment import TacoConfig
from .data import Sample, Vocabulary, make_batch
from .evaluate import CerReport, corpus_cer
from .model import ConfigError, Model, ModelConfig, backward, build, forward

log = logging.getLogger(__name__)

MAGIC = b"ESTR2\0"
FORMAT_VERSION = 1

CHECKPOINT_BEST = "checkpoint.best"
CHECKPOINT_LAST = "checkpoint.last"
METRICS_FILE = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state

    def hyper(self) -> dict[str, Any]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class EarlyStopping:
    """Stops after ``patience`` evaluations without a strictly lower CER."""

    def __init__(self, patience: int = 20):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best: float | None = None
        self.since_best = 0

    def update(self, value: float) -> bool:
        """Records a metric; returns True when it is a new best."""
        if self.best is None or value < self.best:
            self.best = value
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState | None
    epoch: int
    vocabulary: list[str] | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(model: Model, adam: AdamState | None = None, epoch: int = 0,
                      vocabulary: Sequence[str] | None = None, extra: dict | None = None) -> bytes:
    envelope = {
        "model": model.config.to_dict(),
        "epoch": epoch,
        "adam": None if adam is None else adam.hyper(),
        "vocabulary": None if vocabulary is None else list(vocabulary),
        "extra": extra or {},
    }
    cfg = json.dumps(envelope, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = list(model.state_dict().items())
    if adam is not None and adam.m:
        tensors += [(f"adam.m.{k}", a) for k, a in adam.m.items()]
        tensors += [(f"adam.v.{k}", a) for k, a in adam.v.items()]
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(cfg)) + cfg
    body += struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(n, a) for n, a in tensors)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path: str | Path, model: Model, adam: AdamState | None = None, epoch: int = 0,
                    vocabulary: Sequence[str] | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, adam, epoch, vocabulary, extra))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError("truncated checkpoint")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    envelope = json.loads(r.take(r.unpack("<Q")).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<I")).decode("utf-8")
        shape = tuple(r.unpack("<Q") for _ in range(r.unpack("<I")))
        count = math.prod(shape)
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    try:
        config = ModelConfig.from_dict(envelope["model"])
    except ConfigError as exc:
        raise CheckpointError(f"embedded config invalid: {exc}") from None
    vocabulary = envelope.get("vocabulary")
    if vocabulary is not None and len(vocabulary) + 1 != config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocabulary)} symbols but the config's vocab_size "
                              f"is {config.vocab_size} (symbols + blank)")
    model = build(config)
    state = model.state_dict()
    problems = []
    for name, arr in state.items():
        if name not in tensors:
            problems.append(f"missing tensor {name}")
        elif tensors[name].shape != arr.shape:
            problems.append(f"{name}: stored shape {tensors[name].shape}, config implies {arr.shape}")
    expected = set(state) | {t for t in tensors if t.startswith("adam.")}
    problems += [f"unexpected tensor {t}" for t in sorted(set(tensors) - expected)]
    if problems:
        raise CheckpointError("checkpoint does not match its config:\n  " + "\n  ".join(problems))
    for name, arr in state.items():
        arr[...] = tensors[name]

    adam = None
    if envelope.get("adam") is not None:
        adam = AdamState(**envelope["adam"])
        params = model.parameters()
        if any(n.startswith("adam.") for n in tensors):
            adam.m = {k: tensors[f"adam.m.{k}"] for k in params}
            adam.v = {k: tensors[f"adam.v.{k}"] for k in params}
    return Checkpoint(model, adam, envelope["epoch"], vocabulary, envelope.get("extra", {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(data)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(model: Model, samples: Sequence[Sample], vocab: Vocabulary, batch_size: int = 32) -> list[str]:
    """Greedy transcriptions in infer mode."""
    out: list[str] = []
    height = model.config.input_height
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(chunk, vocab, height, encode_labels=False)
        logits, lengths, _ = forward(model, batch.images, batch.widths, "infer")
        for b in range(len(chunk)):
            ids = ctc.greedy_decode(logits[b, :lengths[b]], model.config.blank)
            out.append(vocab.decode(i for i in ids if i < len(vocab)))
    return out


def evaluate_model(model: Model, samples: Sequence[Sample], vocab: Vocabulary,
                   batch_size: int = 32) -> CerReport:
    hyps = predict(model, samples, vocab, batch_size)
    return corpus_cer(zip([s.transcription for s in samples], hyps))


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 20
    eval_every: int = 1
    seed: int = 0
    taco: TacoConfig | None = field(default_factory=TacoConfig)
    weight_policy: str = "none"
    clip_norm: float | None = 5.0
    cosine_decay: bool = False
    stop_at_cer: float | None = None

    def validate(self) -> None:
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.eval_every < 1 or self.max_epochs < 1:
            raise ConfigError("train.eval_every and train.max_epochs must be >= 1")
        if self.weight_policy not in ctc.WEIGHT_POLICIES:
            raise ConfigError(f"train.weight_policy must be one of {sorted(ctc.WEIGHT_POLICIES)}")
        if self.taco is not None:
            try:
                self.taco.validate()
            except ValueError as exc:
                raise ConfigError(f"train.taco: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if self.taco is not None:
            d["taco"]["orientations"] = list(self.taco.orientations)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(f"train config: unknown keys {unknown}")
        data = dict(data)
        if data.get("taco") is not None:
            taco = dict(data["taco"])
            unknown = sorted(set(taco) - set(TacoConfig.__dataclass_fields__))
            if unknown:
                raise ConfigError(f"train.taco: unknown keys {unknown}")
            if "orientations" in taco:
                taco["orientations"] = tuple(taco["orientations"])
            data["taco"] = TacoConfig(**taco)
        elif "taco" in data:
            data["taco"] = None
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_cer: float | None
    seconds: float
    skipped_samples: int


@dataclass
class TrainReport:
    history: list[EpochRecord]
    best_cer: float | None
    best_epoch: int | None
    stopped_early: bool

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.history]


def _learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.cosine_decay:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.max_epochs))


def train_epoch(model: Model, adam: AdamState, samples: Sequence[Sample], vocab: Vocabulary,
                cfg: TrainConfig, epoch: int) -> tuple[float, int]:
    """One shuffled pass; returns (mean sample loss, skipped sample count).

    All randomness derives from ``(seed, epoch, ...)`` so an epoch can be
    replayed exactly after a resume.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
    weight_fn = ctc.WEIGHT_POLICIES[cfg.weight_policy]
    lr = _learning_rate(cfg, epoch)
    total = 0.0
    used = 0
    skipped = 0
    for k, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        chunk = [samples[int(i)] for i in idx]
        rngs = [np.random.default_rng([cfg.seed, epoch, 1, int(i)]) for i in idx]
        batch = make_batch(chunk, vocab, model.config.input_height, cfg.taco, rngs)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 2, k])
        logits, lengths, fctx = forward(model, batch.images, batch.widths, "train", drop_rng)
        weights = [weight_fn(label) for label in batch.labels]
        res = ctc.batch_ctc(logits, lengths, batch.labels, model.config.blank, weights)
        skipped += len(res.skipped)
        if not res.losses:
            raise TrainingError(
                f"epoch {epoch}, batch {k}: every sample is infeasible for CTC "
                f"(output lengths {lengths.tolist()}, label lengths {batch.label_lengths.tolist()})")
        grads = backward(model, fctx, res.grad)
        if cfg.clip_norm is not None:
            clip_by_global_norm(grads, cfg.clip_norm)
        adam_step(model.parameters(), grads, adam, lr)
        model.mark_updated()
        total += math.fsum(res.losses)
        used += len(res.losses)
    return total / used, skipped


def fit(model: Model, train_set: Sequence[Sample], val_set: Sequence[Sample], vocab: Vocabulary,
        cfg: TrainConfig, out_dir: str | Path | None = None,
        resume: Checkpoint | None = None) -> TrainReport:
    """Trains until ``max_epochs`` or early stopping on validation CER."""
    cfg.validate()
    if not train_set or not val_set:
        raise TrainingError("training and validation sets must be non-empty")
    if model.config.vocab_size != vocab.size_with_blank:
        raise ConfigError(f"model vocab_size {model.config.vocab_size} != {vocab.size_with_blank} "
                          f"({len(vocab)} symbols + blank)")
    for s in list(train_set) + list(val_set):
        s.load()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stopper = EarlyStopping(cfg.patience)
    history: list[EpochRecord] = []
    best_epoch = None
    start_epoch = 1
    adam = AdamState.for_params(model.parameters(), lr=cfg.lr)
    if resume is not None:
        for name, arr in model.state_dict().items():
            arr[...] = resume.model.state_dict()[name]
        model.mark_updated()
        if resume.adam is not None:
            adam = resume.adam
        state = resume.extra.get("train_state", {})
        stopper.best = state.get("best_cer")
        stopper.since_best = state.get("since_best", 0)
        best_epoch = state.get("best_epoch")
        history = [EpochRecord(**r) for r in state.get("history", [])]
        start_epoch = resume.epoch + 1

    stopped_early = False
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        loss, skipped = train_epoch(model, adam, train_set, vocab, cfg, epoch)
        val_cer = None
        improved = False
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val_cer = evaluate_model(model, val_set, vocab, cfg.batch_size).cer
            improved = stopper.update(val_cer)
            if improved:
                best_epoch = epoch
        record = EpochRecord(epoch, loss, val_cer, time.perf_counter() - t0, skipped)
        history.append(record)
        log.info("epoch %d loss %.4f val_cer %s skipped %d", epoch, loss,
                 "-" if val_cer is None else f"{val_cer:.2f}", skipped)

        if out is not None:
            with open(out / METRICS_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
            extra = {"train_state": {"best_cer": stopper.best, "since_best": stopper.since_best,
                                     "best_epoch": best_epoch,
                                     "history": [asdict(r) for r in history]},
                     "train_config": cfg.to_dict()}
            save_checkpoint(out / CHECKPOINT_LAST, model, adam, epoch, vocab.chars, extra)
            if improved:
                save_checkpoint(out / CHECKPOINT_BEST, model, adam, epoch, vocab.chars, extra)

        if val_cer is not None and cfg.stop_at_cer is not None and val_cer <= cfg.stop_at_cer:
            break
        if stopper.should_stop:
            stopped_early = True
            break
    return TrainReport(history, stopper.best, best_epoch, stopped_early)
