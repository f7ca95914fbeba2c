"""Image container, depth conversion (icon), contrast normalization and
integer-factor pyramids (iscale), plus PGM / SWR file formats."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ALLOWED_FACTORS = (2, 3, 5)
SWR_MAGIC = b"SWR1"


@dataclass(frozen=True, eq=False)
class Image:
    """A 2D grayscale raster with real-valued pixels, nominally in [0, 1].

    ``coverage`` is an optional boolean mask of the same shape marking
    pixels that carry real data (``None`` means every pixel is covered).
    Rendering produces it; model building and matching honour it.
    """

    pixels: np.ndarray
    section_index: int = 0
    level: int = 0
    scale: int = 1
    coverage: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pix = np.asarray(self.pixels, dtype=np.float64)
        if pix.ndim != 2 or pix.shape[0] < 1 or pix.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2D raster, got shape {pix.shape}")
        if not np.all(np.isfinite(pix)):
            raise ValueError("image pixels must be finite")
        pix.setflags(write=False)
        object.__setattr__(self, "pixels", pix)
        if self.coverage is not None:
            cov = np.asarray(self.coverage, dtype=bool)
            if cov.shape != pix.shape:
                raise ValueError("coverage mask shape does not match pixels")
            cov.setflags(write=False)
            object.__setattr__(self, "coverage", cov)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, **changes) -> "Image":
        return replace(self, pixels=pixels, **changes)


def as_array(img: Image | np.ndarray) -> np.ndarray:
    if isinstance(img, Image):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


@dataclass(frozen=True)
class PyramidSpec:
    """Ordered per-step reduction factors, each one of 2, 3 or 5."""

    factors: tuple[int, ...]

    def __post_init__(self):
        factors = tuple(int(f) for f in self.factors)
        if not factors:
            raise ValueError("pyramid spec needs at least one reduction factor")
        bad = [f for f in factors if f not in ALLOWED_FACTORS]
        if bad:
            raise ValueError(f"pyramid factors must be in {ALLOWED_FACTORS}, got {bad}")
        object.__setattr__(self, "factors", factors)

    @property
    def n_levels(self) -> int:
        return len(self.factors) + 1

    def scales(self) -> list[int]:
        """Cumulative reduction factor of every level, level 0 first."""
        out = [1]
        for f in self.factors:
            out.append(out[-1] * f)
        return out

    def level_dims(self, width: int, height: int) -> list[tuple[int, int]]:
        dims = [(width, height)]
        for f in self.factors:
            w, h = dims[-1]
            dims.append((w // f, h // f))
        return dims

    def check_dims(self, width: int, height: int, min_dim: int = 16) -> None:
        for level, (w, h) in enumerate(self.level_dims(width, height)):
            if w < min_dim or h < min_dim:
                raise ValueError(
                    f"pyramid level {level} would be {w}x{h}, below the {min_dim} pixel minimum"
                )


# ---------------------------------------------------------------- icon

def _nearest_rank_bounds(values: np.ndarray, clip_lo: float, clip_hi: float) -> tuple[float, float]:
    # nearest rank counted from the bottom for the low clip and from the top
    # for the high clip, so (p, 100 - p) saturates ceil(p% * n) pixels per end
    s = np.sort(values, axis=None)
    n = s.size
    lo_idx = max(math.ceil(clip_lo / 100.0 * n) - 1, 0)
    hi_idx = min(n - math.ceil((100.0 - clip_hi) / 100.0 * n), n - 1)
    return float(s[lo_idx]), float(s[hi_idx])


def convert_depth(raw: np.ndarray, clip_lo: float = 0.5, clip_hi: float = 99.5) -> Image:
    """Map a 16-bit raster to [0, 1] by linear percentile clipping.

    Pixels at or below the ``clip_lo`` percentile become 0, at or above the
    ``clip_hi`` percentile become 1, with a linear ramp between.
    """
    raw = np.asarray(raw)
    if raw.size == 0:
        raise ValueError("cannot convert an empty raster")
    if not 0 <= clip_lo < clip_hi <= 100:
        raise ValueError(f"need 0 <= clip_lo < clip_hi <= 100, got ({clip_lo}, {clip_hi})")
    vals = raw.astype(np.float64)
    lo, hi = _nearest_rank_bounds(vals, clip_lo, clip_hi)
    if hi <= lo:
        raise ValueError(f"degenerate percentile range: both clips resolve to {lo}")
    out = np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
    return Image(out.reshape(raw.shape) if raw.ndim == 2 else np.atleast_2d(out))


def normalize_contrast(img: Image, target_mean: float = 0.5, target_std: float = 0.15) -> Image:
    """Affine intensity map to a target mean and standard deviation, then
    clamp to [0, 1]."""
    if target_std <= 0:
        raise ValueError("target_std must be positive")
    pix = img.pixels
    std = pix.std()
    if std == 0:
        raise ValueError("cannot normalize a zero-variance section")
    out = (pix - pix.mean()) * (target_std / std) + target_mean
    return img.with_pixels(np.clip(out, 0.0, 1.0))


# -------------------------------------------------------------- iscale

def downscale(img: Image, factor: int) -> Image:
    """Box-mean reduction by an integer factor; partial blocks are dropped."""
    if factor not in ALLOWED_FACTORS:
        raise ValueError(f"factor must be one of {ALLOWED_FACTORS}, got {factor}")
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise ValueError(f"downscaling {img.width}x{img.height} by {factor} leaves an empty image")
    blocks = img.pixels[: h * factor, : w * factor].reshape(h, factor, w, factor)
    # offset by each block's first sample so constant blocks reduce exactly
    ref = blocks[:, :1, :, :1]
    out = ref[:, 0, :, 0] + (blocks - ref).mean(axis=(1, 3))
    cov = None
    if img.coverage is not None:
        cov = img.coverage[: h * factor, : w * factor].reshape(h, factor, w, factor).all(axis=(1, 3))
    return Image(out, section_index=img.section_index, level=img.level + 1,
                 scale=img.scale * factor, coverage=cov)


def build_pyramid(img: Image, spec: PyramidSpec, min_dim: int = 1) -> list[Image]:
    """Level 0 is ``img``; level k+1 is level k reduced by ``spec.factors[k]``."""
    if not isinstance(spec, PyramidSpec):
        spec = PyramidSpec(tuple(spec))
    if min_dim > 1:
        spec.check_dims(img.width, img.height, min_dim)
    levels = [replace(img, level=0, scale=1)]
    for f in spec.factors:
        levels.append(downscale(levels[-1], f))
    return levels


# --------------------------------------------------------------- files

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) PGM. Returns the integer raster and its maxval."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    width, height, maxval = int(w), int(h), int(maxval)
    pos += 1  # single whitespace byte before the raster
    if maxval < 256:
        dtype = np.dtype(np.uint8)
    elif maxval < 65536:
        dtype = np.dtype(">u2")
    else:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    count = width * height
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width).astype(np.uint16 if maxval >= 256 else np.uint8), maxval


def write_pgm(path: str | Path, img: Image | np.ndarray) -> None:
    """Write an 8-bit P5 PGM, quantizing [0, 1] with round-half-up."""
    pix = np.clip(as_array(img), 0.0, 1.0)
    q = np.floor(pix * 255.0 + 0.5).astype(np.uint8)
    header = b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0])
    Path(path).write_bytes(header + q.tobytes())


def write_swr(path: str | Path, img: Image | np.ndarray) -> None:
    pix = as_array(img)
    h, w = pix.shape
    header = SWR_MAGIC + struct.pack("<II", w, h) + b"\0\0\0\0"
    Path(path).write_bytes(header + pix.astype("<f4").tobytes())


def read_swr(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != SWR_MAGIC:
        raise ValueError(f"{path}: bad SWR magic")
    w, h = struct.unpack("<II", buf[4:12])
    data = np.frombuffer(buf, dtype="<f4", count=w * h, offset=16)
    return data.reshape(h, w).astype(np.float64)


def load_image(path: str | Path, section_index: int = 0) -> Image:
    """Load a PGM (scaled by its maxval) or SWR file as an :class:`Image`."""
    path = Path(path)
    if path.suffix.lower() == ".swr":
        return Image(read_swr(path), section_index=section_index)
    raw, maxval = read_pgm(path)
    return Image(raw.astype(np.float64) / maxval, section_index=section_index)


def save_image(path: str | Path, img: Image | np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".swr":
        write_swr(path, img)
    else:
        write_pgm(path, img)


def stack_shape(images: Sequence[Image]) -> tuple[int, int]:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")
    return shapes.pop()
