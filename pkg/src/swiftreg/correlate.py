"""Apodized, spectrally whitened FFT correlation (swim).

The whitening exponent ``w`` divides every cross-power coefficient by
``|c| ** w``: ``w = 0`` keeps the raw amplitudes (plain correlation) and
``w = 1`` keeps phase only. Whitening is applied once to the cross-power
product; whitening each input spectrum with ``w / 2`` before the product
gives the same map.

Offsets follow one convention everywhere: a positive ``dx`` means the
content of the second patch sits at larger x than in the first.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .image_io import Image, as_array

logger = logging.getLogger(__name__)

DEFAULT_TAPER = 0.125
DEFAULT_EXCLUSION = 8
MIN_PATCH = 16


@dataclass(frozen=True)
class WhiteningParams:
    w: float = 0.7
    eps_frac: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"whitening exponent must lie in [0, 1], got {self.w}")
        if not 0.0 < self.eps_frac < 1.0:
            raise ValueError(f"eps_frac must lie in (0, 1), got {self.eps_frac}")


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    """Correlation surface with zero offset at index ``(height // 2, width // 2)``."""

    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def center(self) -> tuple[int, int]:
        """(row, col) of the zero-offset sample."""
        return self.height // 2, self.width // 2

    def at_offset(self, dx: int, dy: int) -> float:
        r, c = self.center
        return float(self.values[(r + dy) % self.height, (c + dx) % self.width])


@dataclass(frozen=True)
class MatchResult:
    dx: float
    dy: float
    snr: float
    peak_value: float
    whitening_used: float
    valid: bool


@dataclass(frozen=True)
class MatchPoint:
    """A patch correspondence: the patch centred at ``center`` in the first
    image shows up at ``center + offset`` in the second."""

    center: tuple[float, float]
    offset: tuple[float, float]
    snr: float
    valid: bool
    peak_value: float = 0.0

    @property
    def destination(self) -> tuple[float, float]:
        return self.center[0] + self.offset[0], self.center[1] + self.offset[1]

    def to_json(self) -> dict:
        return {"cx": self.center[0], "cy": self.center[1], "dx": self.offset[0],
                "dy": self.offset[1], "snr": self.snr, "valid": bool(self.valid)}

    @classmethod
    def from_json(cls, d: dict) -> "MatchPoint":
        return cls((float(d["cx"]), float(d["cy"])), (float(d["dx"]), float(d["dy"])),
                   float(d["snr"]), bool(d["valid"]))


def raised_cosine(t):
    """Taper profile rising from 0 at ``t = 0`` to 1 at ``t = 1``."""
    t = np.clip(t, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def taper_window(n: int, taper_frac: float) -> np.ndarray:
    """1D window: flat 1 in the middle, raised cosine across each end band
    of width ``taper_frac * n``."""
    if not 0.0 < taper_frac <= 0.5:
        raise ValueError(f"taper_frac must lie in (0, 0.5], got {taper_frac}")
    band = taper_frac * n
    i = np.arange(n, dtype=np.float64)
    edge_dist = np.minimum(i, n - 1 - i)
    return raised_cosine(edge_dist / band)


def apodize(patch: Image | np.ndarray, taper_frac: float = DEFAULT_TAPER) -> np.ndarray:
    """Mean-subtract a patch and taper its borders with a separable
    raised-cosine window. Interior pixels keep their mean-subtracted value.

    ``taper_frac = 0`` disables the taper (mean subtraction only), which is
    what periodic test inputs want.
    """
    pix = as_array(patch)
    # offset by one sample first so a constant patch centres to exact zeros
    shifted = pix - pix.flat[0]
    centered = shifted - shifted.mean()
    if taper_frac == 0:
        return centered
    wy = taper_window(pix.shape[0], taper_frac)
    wx = taper_window(pix.shape[1], taper_frac)
    return centered * wy[:, None] * wx[None, :]


def _whiten(spec: np.ndarray, params: WhiteningParams) -> np.ndarray:
    mag = np.abs(spec)
    floor = params.eps_frac * mag.max()
    keep = mag >= floor
    keep &= mag > 0
    out = np.zeros_like(spec)
    if params.w == 0:
        out[keep] = spec[keep]
    else:
        out[keep] = spec[keep] * mag[keep] ** (-params.w)
    out[0, 0] = 0
    return out


def whiten_spectrum(spec: np.ndarray, params: WhiteningParams) -> np.ndarray:
    """Divide each coefficient by ``|c| ** w``; coefficients below
    ``eps_frac * max|c|`` and the DC term become zero. Phases are untouched."""
    return _whiten(np.asarray(spec, dtype=np.complex128), params)


def correlate(a: Image | np.ndarray, b: Image | np.ndarray,
              params: WhiteningParams = WhiteningParams(),
              taper_frac: float = DEFAULT_TAPER) -> CorrelationMap:
    """Whitened cross-correlation of two equally sized patches.

    The peak of the returned map sits at the displacement of ``b``'s content
    relative to ``a``.
    """
    pa, pb = as_array(a), as_array(b)
    if pa.shape != pb.shape:
        raise ValueError(f"patch shapes differ: {pa.shape} vs {pb.shape}")
    if min(pa.shape) < MIN_PATCH:
        raise ValueError(f"patches must be at least {MIN_PATCH} pixels per axis, got {pa.shape}")
    fa = scipy.fft.rfft2(apodize(pa, taper_frac))
    fb = scipy.fft.rfft2(apodize(pb, taper_frac))
    # conj on the first factor puts the peak at +displacement of b
    cross = _whiten(np.conj(fa) * fb, params)
    surface = scipy.fft.irfft2(cross, s=pa.shape)
    return CorrelationMap(scipy.fft.fftshift(surface))


def parabolic_offset(left: float, center: float, right: float) -> float:
    """Vertex of the parabola through (-1, left), (0, center), (1, right),
    clamped to [-0.5, 0.5]. Returns 0 when the samples are not a local max."""
    curv = 2.0 * center - left - right
    if curv <= 0:
        return 0.0
    return float(np.clip((right - left) / (2.0 * curv), -0.5, 0.5))


def find_peak(cmap: CorrelationMap, exclusion_radius: int = DEFAULT_EXCLUSION,
              whitening_used: float = float("nan")) -> MatchResult:
    """Locate the global maximum and score it as a Z-score against every map
    sample outside a (wrap-aware) disc around the peak."""
    if exclusion_radius < 1:
        raise ValueError("exclusion_radius must be >= 1")
    v = cmap.values
    h, w = v.shape
    if min(h, w) < 4 * exclusion_radius:
        raise ValueError(f"map {w}x{h} too small for exclusion radius {exclusion_radius}")
    pr, pc = np.unravel_index(int(np.argmax(v)), v.shape)
    peak = float(v[pr, pc])

    ry = np.abs(np.arange(h) - pr)
    ry = np.minimum(ry, h - ry)
    rx = np.abs(np.arange(w) - pc)
    rx = np.minimum(rx, w - rx)
    background = v[(ry[:, None] ** 2 + rx[None, :] ** 2) > exclusion_radius ** 2]
    mean_bg = background.mean()
    std_bg = background.std()

    fy = fx = 0.0
    if 0 < pr < h - 1 and 0 < pc < w - 1:
        fx = parabolic_offset(v[pr, pc - 1], peak, v[pr, pc + 1])
        fy = parabolic_offset(v[pr - 1, pc], peak, v[pr + 1, pc])
    cr, cc = cmap.center
    dx, dy = pc - cc + fx, pr - cr + fy

    if not std_bg > 0:
        return MatchResult(dx, dy, 0.0, peak, whitening_used, False)
    snr = max((peak - mean_bg) / std_bg, 0.0)
    return MatchResult(dx, dy, float(snr), peak, whitening_used, True)


def _fill_uncovered(pix: np.ndarray, cov: np.ndarray | None) -> tuple[np.ndarray, float]:
    if cov is None or cov.all():
        return pix, float(pix.std())
    if not cov.any():
        return np.zeros_like(pix), 0.0
    inside = pix[cov]
    out = np.where(cov, pix, inside.mean())
    return out, float(inside.std())


def match_patch(model_patch: Image | np.ndarray, target_patch: Image | np.ndarray,
                params: WhiteningParams = WhiteningParams(),
                taper_frac: float = DEFAULT_TAPER, max_offset: float = 64,
                content_floor: float = 0.01,
                exclusion_radius: int = DEFAULT_EXCLUSION) -> MatchResult:
    """Correlate two patches, gating on content and on the offset bound.

    Pixels outside an :class:`Image`'s coverage mask are replaced by the
    mean of its covered pixels so they vanish after mean subtraction.
    """
    ma = as_array(model_patch)
    tb = as_array(target_patch)
    ma, std_a = _fill_uncovered(ma, getattr(model_patch, "coverage", None))
    tb, std_b = _fill_uncovered(tb, getattr(target_patch, "coverage", None))
    if std_a < content_floor or std_b < content_floor:
        return MatchResult(0.0, 0.0, 0.0, 0.0, params.w, False)
    res = find_peak(correlate(ma, tb, params, taper_frac), exclusion_radius, params.w)
    if abs(res.dx) > max_offset or abs(res.dy) > max_offset:
        return MatchResult(res.dx, res.dy, res.snr, res.peak_value, params.w, False)
    return res


def grid_centers(width: int, height: int, grid: tuple[int, int], patch_size: int) -> list[tuple[int, int]]:
    """Top-left corners of a rows x cols lattice of patches spread evenly
    from edge to edge of the image, row-major."""
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid}")
    if patch_size > width or patch_size > height:
        raise ValueError(f"patch {patch_size} does not fit in a {width}x{height} image")

    def starts(n, extent):
        if n == 1:
            return [(extent - patch_size) // 2]
        return [int(round(s)) for s in np.linspace(0, extent - patch_size, n)]

    return [(x0, y0) for y0 in starts(rows, height) for x0 in starts(cols, width)]


def grid_match(model: Image | np.ndarray, target: Image | np.ndarray, grid: tuple[int, int],
               patch_size: int, params: WhiteningParams = WhiteningParams(),
               taper_frac: float = DEFAULT_TAPER, max_offset: float = 64,
               content_floor: float = 0.01, exclusion_radius: int = DEFAULT_EXCLUSION,
               workers: int | None = None) -> list[MatchPoint]:
    """Match ``target`` against ``model`` on a lattice of local patches.

    Every lattice cell yields a :class:`MatchPoint`; failed matches are kept
    with ``valid=False``. Patch centres are geometric pixel centres, so a
    patch starting at x0 is centred at ``x0 + (patch_size - 1) / 2``.
    """
    m_pix, t_pix = as_array(model), as_array(target)
    if m_pix.shape != t_pix.shape:
        raise ValueError(f"model and target shapes differ: {m_pix.shape} vs {t_pix.shape}")
    m_cov = getattr(model, "coverage", None)
    t_cov = getattr(target, "coverage", None)
    h, w = m_pix.shape
    corners = grid_centers(w, h, grid, patch_size)
    half = (patch_size - 1) / 2.0

    def one(corner):
        x0, y0 = corner
        sl = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        mp = Image(m_pix[sl], coverage=None if m_cov is None else m_cov[sl])
        tp = Image(t_pix[sl], coverage=None if t_cov is None else t_cov[sl])
        r = match_patch(mp, tp, params, taper_frac, max_offset, content_floor, exclusion_radius)
        return MatchPoint((x0 + half, y0 + half), (r.dx, r.dy), r.snr, r.valid, r.peak_value)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, corners))
    return [one(c) for c in corners]
