"""Binary PGM (P5) reading/writing, optional PNG input, bilinear resize."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageError(ValueError):
    pass


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageError("truncated PGM header")
    return data[start:pos], pos


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise ImageError("not a binary PGM (P5) file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageError(f"bad PGM header field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageError("PGM has a zero dimension")
    if maxval != 255:
        raise ImageError(f"only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:pos + width * height]
    if len(pixels) != width * height:
        raise ImageError("truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_image(path: str | Path) -> np.ndarray:
    """Loads an 8-bit grayscale image as ``uint8 [H, W]``; PGM or PNG."""
    path = Path(path)
    try:
        head = path.read_bytes()[:8]
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc.strerror}") from None
    if head[:2] == b"P5":
        return read_pgm(path)
    if head.startswith(b"\x89PNG"):
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover
            raise ImageError("PNG input needs Pillow installed") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    raise ImageError(f"{path}: unsupported image format")


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Returns float64 in the input's intensity scale.
    """
    src = np.asarray(img, dtype=np.float64)
    h0, w0 = src.shape
    if h0 < 1 or w0 < 1 or height < 1 or width < 1:
        raise ImageError("resize needs positive dimensions")

    def axis_weights(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(height, h0)
    c0, c1, fc = axis_weights(width, w0)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]
