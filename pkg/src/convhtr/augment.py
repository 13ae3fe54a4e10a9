"""Tiling-and-corruption augmentation for grayscale line images.

Images are ``uint8`` arrays of shape ``[H, W]`` with background 255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import write_pgm

KINDS = ("black", "white", "mean", "random", "miscellaneous")
BASE_KINDS = ("black", "white", "mean", "random")
ORIENTATIONS = ("vertical", "horizontal")
PREVIEW_SEPARATOR = 4


@dataclass
class TacoConfig:
    corruption_prob: float = 0.25
    max_tile_width: int | None = None  # None -> image height
    orientations: tuple[str, ...] = ("vertical", "horizontal")
    kind: str = "random"
    seed: int = 0

    def validate(self, height: int | None = None) -> None:
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError(f"corruption_prob must lie in [0, 1], got {self.corruption_prob}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        bad = [o for o in self.orientations if o not in ORIENTATIONS]
        if bad or not self.orientations:
            raise ValueError(f"orientations must be a non-empty subset of {ORIENTATIONS}")
        if height is not None and self.tile_limit(height) < min_tile_width(height):
            raise ValueError(f"max_tile_width {self.tile_limit(height)} is below "
                             f"ceil(H/10) = {min_tile_width(height)}")

    def tile_limit(self, height: int) -> int:
        return height if self.max_tile_width is None else self.max_tile_width


def min_tile_width(height: int) -> int:
    return max(1, math.ceil(height / 10))


def sample_tile_width(height: int, max_tile_width: int, rng: np.random.Generator) -> int:
    """Uniform integer in ``[ceil(H/10), max_tile_width]``."""
    lo = min_tile_width(height)
    if max_tile_width < lo:
        raise ValueError(f"tile width range [{lo}, {max_tile_width}] is empty")
    return int(rng.integers(lo, max_tile_width + 1))


def make_corrupt_tile(kind: str, source: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A replacement tile shaped like ``source``."""
    if source.size == 0:
        raise ValueError("tile dimensions must be positive")
    if kind == "miscellaneous":
        kind = BASE_KINDS[int(rng.integers(len(BASE_KINDS)))]
    if kind == "black":
        return np.zeros_like(source)
    if kind == "white":
        return np.full_like(source, 255)
    if kind == "mean":
        # round half up
        value = math.floor(float(source.mean(dtype=np.float64)) + 0.5)
        return np.full_like(source, value)
    if kind == "random":
        return rng.integers(0, 256, size=source.shape, dtype=np.uint8)
    raise ValueError(f"unknown corruption kind {kind!r}")


@dataclass(frozen=True)
class TileEvent:
    orientation: str
    start: int
    stop: int
    corrupted: bool


def _tile_pass(img: np.ndarray, cfg: TacoConfig, orientation: str, rng: np.random.Generator,
               events: list[TileEvent]) -> np.ndarray:
    height = img.shape[0]
    tile_w = sample_tile_width(height, cfg.tile_limit(height), rng)
    axis = 1 if orientation == "vertical" else 0
    extent = img.shape[axis]
    out = img.copy()
    for start in range(0, extent, tile_w):
        stop = min(start + tile_w, extent)
        p = rng.random()
        hit = p <= cfg.corruption_prob and cfg.corruption_prob > 0.0
        if hit:
            region = (slice(None), slice(start, stop)) if axis == 1 else (slice(start, stop), slice(None))
            out[region] = make_corrupt_tile(cfg.kind, img[region], rng)
        events.append(TileEvent(orientation, start, stop, hit))
    return out


def taco_with_events(img: np.ndarray, cfg: TacoConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, list[TileEvent]]:
    """Like :func:`taco` but also returns every tile decision."""
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty [H, W] image, got shape {img.shape}")
    cfg.validate(img.shape[0])
    events: list[TileEvent] = []
    out = img
    for orientation in ORIENTATIONS:  # vertical first, then horizontal
        if orientation in cfg.orientations:
            out = _tile_pass(out, cfg, orientation, rng, events)
    return out, events


def taco(img: np.ndarray, cfg: TacoConfig, rng: np.random.Generator) -> np.ndarray:
    """Cut into tiles, replace each with probability ``corruption_prob``,
    stitch back. Vertical tiles span the width, horizontal ones the height;
    the last tile keeps whatever width remains."""
    return taco_with_events(img, cfg, rng)[0]


def preview_image(img: np.ndarray, cfg: TacoConfig, rng: np.random.Generator) -> np.ndarray:
    augmented = taco(img, cfg, rng)
    sep = np.full((img.shape[0], PREVIEW_SEPARATOR), 128, dtype=np.uint8)
    return np.concatenate([img, sep, augmented], axis=1)


def preview(img: np.ndarray, cfg: TacoConfig, rng: np.random.Generator, out_path: str | Path) -> Path:
    """Writes the original and augmented image side by side as PGM."""
    out_path = Path(out_path)
    write_pgm(out_path, preview_image(img, cfg, rng))
    return out_path
