"""Corpus ingestion, label encoding, preprocessing and batching.

Manifests are UTF-8 text, one ``<image-path>\\t<transcription>`` record per
line; relative image paths resolve against the manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import augment
from .imageio import read_image, resize_bilinear

# 79 symbols: space, punctuation, digits, upper and lower case letters
IAM_CHARSET = " !\"#&'()*+,-./0123456789:;?ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"

DEFAULT_GAP = 16


class ManifestError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Ordered symbol list; ids are positions and the CTC blank is ``len``."""

    def __init__(self, chars: Iterable[str]):
        self.chars = list(chars)
        self.index = {c: i for i, c in enumerate(self.chars)}
        if len(self.index) != len(self.chars):
            raise VocabularyError("vocabulary has duplicate symbols")
        if any(len(c) != 1 for c in self.chars):
            raise VocabularyError("vocabulary entries must be single characters")

    def __len__(self) -> int:
        return len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.chars == other.chars

    @property
    def blank(self) -> int:
        return len(self.chars)

    @property
    def size_with_blank(self) -> int:
        return len(self.chars) + 1

    def unknown(self, text: str) -> list[str]:
        return sorted({c for c in text if c not in self.index})

    def encode(self, text: str) -> list[int]:
        missing = self.unknown(text)
        if missing:
            raise VocabularyError(f"characters not in vocabulary: {missing!r}")
        return [self.index[c] for c in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.chars[i] for i in ids)

    @classmethod
    def iam(cls) -> "Vocabulary":
        return cls(IAM_CHARSET)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        """One symbol per line; only the line terminator is stripped."""
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(line[:-1] if line.endswith("\r") else line for line in lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(c + "\n" for c in self.chars), encoding="utf-8")


@dataclass
class Sample:
    path: str | None
    transcription: str
    split: str = ""
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise ManifestError("sample has neither an image nor a path")
            self.image = read_image(self.path)
        return self.image


def load_manifest(path: str | Path, vocab: Vocabulary | None = None, split: str = "") -> list[Sample]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not valid UTF-8 ({exc})") from None

    samples: list[Sample] = []
    problems: list[str] = []
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        if "\t" not in line:
            problems.append(f"line {lineno}: missing tab separator")
            continue
        img_path, transcription = line.split("\t", 1)
        if not transcription:
            problems.append(f"line {lineno}: empty transcription")
            continue
        if vocab is not None:
            missing = vocab.unknown(transcription)
            if missing:
                problems.append(f"line {lineno}: characters not in vocabulary {missing!r}")
                continue
        p = Path(img_path)
        if not p.is_absolute():
            p = path.parent / p
        samples.append(Sample(str(p), transcription, split))
    if problems:
        raise ManifestError(f"{path}:\n  " + "\n  ".join(problems))
    return samples


def scaled_width(width: int, height: int, target_height: int) -> int:
    return max(1, math.floor(width * target_height / height + 0.5))


def preprocess(img: np.ndarray, target_height: int) -> np.ndarray:
    """Grayscale ``[H, W]`` -> float32 frames ``[W', target_height]``.

    Resizes to the target height keeping aspect ratio, maps to [0, 1] and
    inverts so ink is high and background is 0.
    """
    if target_height < 8:
        raise ValueError("target_height must be >= 8")
    if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty [H, W] image, got shape {img.shape}")
    h, w = img.shape
    if h == target_height:
        scaled = img.astype(np.float64)
    else:
        scaled = resize_bilinear(img, target_height, scaled_width(w, h, target_height))
    return np.ascontiguousarray((1.0 - scaled / 255.0).T, dtype=np.float32)


@dataclass
class Batch:
    images: np.ndarray  # [B, W_max, H]
    widths: np.ndarray
    labels: list[list[int]]
    label_lengths: np.ndarray
    transcriptions: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(samples: Sequence[Sample], vocab: Vocabulary, height: int,
               taco_cfg: augment.TacoConfig | None = None,
               rngs: Sequence[np.random.Generator] | np.random.Generator | None = None,
               encode_labels: bool = True) -> Batch:
    """Augments (optionally), preprocesses, right-pads with background and
    encodes labels. ``rngs`` is one generator per sample or a shared one;
    ``encode_labels=False`` leaves labels empty for unlabeled images."""
    if not samples:
        raise ValueError("make_batch needs at least one sample")
    if taco_cfg is not None and rngs is None:
        raise ValueError("augmentation needs random generators")
    frames = []
    for i, s in enumerate(samples):
        img = s.load()
        if taco_cfg is not None:
            rng = rngs[i] if isinstance(rngs, Sequence) else rngs
            img = augment.taco(img, taco_cfg, rng)
        frames.append(preprocess(img, height))
    widths = np.array([f.shape[0] for f in frames], dtype=np.int64)
    images = np.zeros((len(frames), int(widths.max()), height), dtype=np.float32)
    for i, f in enumerate(frames):
        images[i, :f.shape[0]] = f
    labels = [vocab.encode(s.transcription) if encode_labels else [] for s in samples]
    return Batch(images, widths, labels, np.array([len(l) for l in labels], dtype=np.int64),
                 [s.transcription for s in samples])


def concat_lines(left: np.ndarray, right: np.ndarray, gap: int = DEFAULT_GAP) -> np.ndarray:
    """Stacks two line images horizontally with a white gap between them."""
    h = left.shape[0]
    if right.shape[0] != h:
        new_w = scaled_width(right.shape[1], right.shape[0], h)
        right = np.clip(np.floor(resize_bilinear(right, h, new_w) + 0.5), 0, 255).astype(np.uint8)
    spacer = np.full((h, gap), 255, dtype=np.uint8)
    return np.concatenate([left, spacer, right], axis=1)


def synth_long_lines(samples: Sequence[Sample], count: int, rng: np.random.Generator,
                     gap: int = DEFAULT_GAP) -> list[Sample]:
    """Pairs of random sources (with replacement) joined into long lines;
    labels are joined with a space."""
    if len(samples) < 2:
        raise ValueError("need at least two source samples")
    out = []
    for k in range(count):
        i, j = rng.integers(len(samples), size=2)
        a, b = samples[int(i)], samples[int(j)]
        img = concat_lines(a.load(), b.load(), gap)
        out.append(Sample(None, f"{a.transcription} {b.transcription}", "long-lines", image=img))
    return out


def few_shot_subset(samples: Sequence[Sample], fraction: float, seed: int) -> list[Sample]:
    """Prefix of a seeded permutation, so smaller fractions nest in larger."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = math.floor(fraction * len(samples))
    if n == 0:
        raise ValueError(f"fraction {fraction} of {len(samples)} samples leaves nothing")
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[int(i)] for i in order[:n]]


# ---------------------------------------------------------------------------
# synthetic stroke corpus
# ---------------------------------------------------------------------------


def _stroke(canvas: np.ndarray, p0, p1, ink: int, thickness: int = 2) -> None:
    (y0, x0), (y1, x1) = p0, p1
    steps = int(max(abs(y1 - y0), abs(x1 - x0)) * 2) + 1
    h, w = canvas.shape
    for s in np.linspace(0.0, 1.0, steps):
        y = int(round(y0 + (y1 - y0) * s))
        x = int(round(x0 + (x1 - x0) * s))
        canvas[max(0, y):min(h, y + thickness), max(0, x):min(w, x + thickness)] = ink


def _glyph(symbol_index: int, h: int, w: int, ink: int) -> np.ndarray:
    g = np.full((h, w), 255, dtype=np.uint8)
    top, bot, mid = 1, h - 3, h // 2 - 1
    left, right, cx = 0, w - 2, w // 2 - 1
    shapes = [
        [((top, cx), (bot, cx))],                                          # |
        [((top, left), (top, right)), ((top, right), (bot, right)),        # box
         ((bot, right), (bot, left)), ((bot, left), (top, left))],
        [((top, left), (bot, right)), ((top, right), (bot, left))],        # X
        [((mid - 3, left), (mid - 3, right)), ((mid + 3, left), (mid + 3, right))],  # =
        [((bot, left), (top, cx)), ((top, cx), (bot, right))],             # ^
        [((top, left), (bot, left)), ((mid, left), (mid, right))],         # |-
        [((top, left), (top, right)), ((top, right), (bot, left))],        # 7
        [((top, left), (bot, right))],                                     # backslash
    ]
    for p0, p1 in shapes[symbol_index % len(shapes)]:
        _stroke(g, p0, p1, ink)
    return g


def render_line(text: str, symbols: str, height: int, rng: np.random.Generator) -> np.ndarray:
    """Renders ``text`` with one stroke glyph per symbol, with jittered
    spacing, baseline and ink."""
    glyph_w = max(4, (height * 5) // 8)
    pieces = [np.full((height, int(rng.integers(2, 6))), 255, dtype=np.uint8)]
    for ch in text:
        ink = int(rng.integers(0, 60))
        g = _glyph(symbols.index(ch), height, glyph_w, ink)
        g = np.roll(g, int(rng.integers(-1, 2)), axis=0)
        pieces.append(g)
        pieces.append(np.full((height, int(rng.integers(2, 6))), 255, dtype=np.uint8))
    return np.concatenate(pieces, axis=1)


def synthetic_corpus(n: int, symbols: str = "abcd", height: int = 16, min_len: int = 3,
                     max_len: int = 6, seed: int = 0) -> list[Sample]:
    """Generated line images over a small stroke alphabet."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        text = "".join(symbols[int(k)] for k in rng.integers(len(symbols), size=length))
        out.append(Sample(None, text, "synthetic", image=render_line(text, symbols, height, rng)))
    return out

