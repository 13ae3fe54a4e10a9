"""CTC loss (log-space forward-backward), brute-force oracle, greedy decoding."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import ContractError, log_softmax

log = logging.getLogger(__name__)

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """The label needs more frames than the logits provide."""


WeightPolicy = Callable[[Sequence[int]], float]


def unit_weight(label: Sequence[int]) -> float:
    return 1.0


def length_ratio_weight(label: Sequence[int]) -> float:
    # placeholder policy; the weighting formula is left pluggable
    return len(label) / max(1, len(label))


WEIGHT_POLICIES: dict[str, WeightPolicy] = {"none": unit_weight, "length_ratio": length_ratio_weight}


def extend_label(label: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def min_frames(label: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


@dataclass
class CtcTable:
    """Forward/backward lattice over the blank-interleaved label.

    ``beta[t, s]`` excludes the emission at ``t``, so
    ``logsumexp(alpha[t] + beta[t])`` is the log-likelihood for every ``t``.
    """

    alpha: np.ndarray  # [T, S]
    beta: np.ndarray  # [T, S]
    extended_label: np.ndarray

    @property
    def log_likelihood(self) -> float:
        return float(np.logaddexp.reduce(self.alpha[-1, -2:]))


def _lattice(logp: np.ndarray, ext: np.ndarray, blank: int) -> CtcTable:
    t_len = logp.shape[0]
    s_len = len(ext)
    emit = logp[:, ext]  # [T, S]
    # s-2 -> s transitions allowed onto non-blank symbols that differ from s-2
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(s_len, dtype=bool)  # s -> s+2 allowed
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return CtcTable(alpha, beta, ext)


def _validate(logits: np.ndarray, label: Sequence[int], blank: int) -> None:
    if logits.ndim != 2:
        raise ContractError(f"ctc expects logits [T, V], got {logits.shape}")
    v = logits.shape[1]
    if not 0 <= blank < v:
        raise ContractError(f"blank {blank} outside [0, {v})")
    for c in label:
        if not 0 <= c < v or c == blank:
            raise ContractError(f"label id {c} invalid for V={v}, blank={blank}")


def ctc_table(logits: np.ndarray, label: Sequence[int], blank: int) -> CtcTable:
    _validate(logits, label, blank)
    logp, _ = log_softmax(np.asarray(logits, dtype=np.float64))
    return _lattice(logp, extend_label(label, blank), blank)


def ctc_loss(logits: np.ndarray, label: Sequence[int], blank: int,
             sample_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Weighted negative log-likelihood and its gradient w.r.t. raw logits.

    Computation runs in float64; the gradient is returned in the logits'
    dtype.
    """
    _validate(logits, label, blank)
    if not sample_weight >= 0:
        raise ContractError("sample_weight must be non-negative")
    t_len = logits.shape[0]
    if t_len < min_frames(label):
        raise InfeasibleAlignmentError(
            f"{t_len} frames cannot align a label needing {min_frames(label)}")
    logp, _ = log_softmax(np.asarray(logits, dtype=np.float64))
    ext = extend_label(label, blank)
    table = _lattice(logp, ext, blank)
    ll = table.log_likelihood
    if not np.isfinite(ll):
        raise InfeasibleAlignmentError("label has zero probability under the logits")

    # posterior occupancy of each lattice state, folded onto symbols
    post = np.exp(table.alpha + table.beta - ll)
    occupancy = np.zeros_like(logp)
    np.add.at(occupancy, (slice(None), ext), post)
    grad = sample_weight * (np.exp(logp) - occupancy)
    return -sample_weight * ll, grad.astype(logits.dtype, copy=False)


def ctc_brute_force(logits: np.ndarray, label: Sequence[int], blank: int,
                    max_paths: int = 10**6) -> float:
    """Enumerates every frame path; returns ``-log p(label)`` (``inf`` if 0)."""
    _validate(logits, label, blank)
    t_len, v = logits.shape
    if v ** t_len > max_paths:
        raise ValueError(f"{v}^{t_len} paths exceeds the enumeration limit {max_paths}")
    logp = np.asarray(logits, dtype=np.float64)
    logp = logp - logp.max(axis=1, keepdims=True)
    probs = np.exp(logp)
    probs /= probs.sum(axis=1, keepdims=True)
    target = list(label)
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank) == target:
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return math.inf if total == 0.0 else -math.log(total)


def collapse(path: Sequence[int], blank: int) -> list[int]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def greedy_decode(logits: np.ndarray, blank: int) -> list[int]:
    """Per-frame argmax (lowest index on ties), merge repeats, drop blanks."""
    if len(logits) == 0:
        return []
    return collapse(np.argmax(logits, axis=-1).tolist(), blank)


@dataclass
class BatchCtcResult:
    loss: float
    grad: np.ndarray
    skipped: list[int]
    losses: list[float]


def batch_ctc(logits: np.ndarray, out_lengths, labels: Sequence[Sequence[int]], blank: int,
              weights: Sequence[float] | None = None) -> BatchCtcResult:
    """Mean CTC loss over a padded batch ``[B, T, V]``.

    Each sample only sees its first ``out_lengths[b]`` frames; padded frames
    get zero gradient. Infeasible samples are skipped and reported by index.
    """
    b = logits.shape[0]
    if weights is None:
        weights = [1.0] * b
    grad = np.zeros_like(logits)
    losses: list[float] = []
    used: list[int] = []
    skipped: list[int] = []
    for i in range(b):
        n = int(out_lengths[i])
        try:
            loss, g = ctc_loss(logits[i, :n], labels[i], blank, weights[i])
        except InfeasibleAlignmentError as exc:
            log.warning("skipping sample %d: %s", i, exc)
            skipped.append(i)
            continue
        losses.append(loss)
        used.append(i)
        grad[i, :n] = g
    if not used:
        return BatchCtcResult(math.nan, grad, skipped, losses)
    grad /= len(used)
    return BatchCtcResult(math.fsum(losses) / len(used), grad, skipped, losses)
