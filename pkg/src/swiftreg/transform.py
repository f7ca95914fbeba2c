"""Affine fitting, locally affine triangle meshes and texture-mapped
rendering (mir), plus spline bridging of failed section spans.

Coordinates are (x, y) in pixels with pixel (row i, col j) centred at
``x = j, y = i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .correlate import MatchPoint
from .image_io import Image, as_array

logger = logging.getLogger(__name__)

__all__ = [
    "AffineTransform", "MatchPoint", "TriangleMesh", "FoldOverError",
    "solve_affine", "compose", "invert", "build_mesh", "render", "resample",
    "bridge_gap", "sample_bilinear",
]

DET_TOL = 1e-6
COND_LIMIT = 1e8


class FoldOverError(ValueError):
    """A mesh whose mapped triangles flip orientation."""


@dataclass(frozen=True)
class AffineTransform:
    """Maps (x, y) to (a11 x + a12 y + tx, a21 x + a22 y + ty)."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        # keep plain floats so equality, hashing and JSON behave
        for name in ("a11", "a12", "a21", "a22", "tx", "ty"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]),
                   float(m[0, 2]), float(m[1, 2]))

    @classmethod
    def from_params(cls, rotation_deg: float = 0.0, scale: float = 1.0, shear: float = 0.0,
                    translation: tuple[float, float] = (0.0, 0.0),
                    center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Rotation * [[s, shear], [0, s]] about ``center``, then translation."""
        th = np.deg2rad(rotation_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        lin = rot @ np.array([[scale, shear], [0.0, scale]])
        c = np.asarray(center, dtype=np.float64)
        t = c - lin @ c + np.asarray(translation, dtype=np.float64)
        return cls(*(float(v) for v in (lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], t[0], t[1])))

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "AffineTransform":
        if len(values) != 6:
            raise ValueError(f"an affine needs 6 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.params()]

    def apply(self, pts) -> np.ndarray:
        """Map an (..., 2) array of (x, y) points."""
        p = np.asarray(pts, dtype=np.float64)
        x, y = p[..., 0], p[..., 1]
        return np.stack([self.a11 * x + self.a12 * y + self.tx,
                         self.a21 * x + self.a22 * y + self.ty], axis=-1)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return compose(self, other)

    def scaled(self, factor: float, offset: float = 0.0) -> "AffineTransform":
        """Express this transform in coordinates ``x' = factor * x + offset``."""
        # conjugate by the coordinate change S: S A S^-1
        s = np.array([[factor, 0, offset], [0, factor, offset], [0, 0, 1.0]])
        return AffineTransform.from_matrix(s @ self.matrix @ np.linalg.inv(s))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """The transform applying ``b`` first, then ``a``."""
    return AffineTransform.from_matrix(a.matrix @ b.matrix)


def invert(a: AffineTransform) -> AffineTransform:
    det = a.det
    if abs(det) <= DET_TOL:
        raise ValueError(f"cannot invert a singular affine (det={det:g})")
    i11, i12, i21, i22 = a.a22 / det, -a.a12 / det, -a.a21 / det, a.a11 / det
    return AffineTransform(i11, i12, i21, i22,
                           -(i11 * a.tx + i12 * a.ty), -(i21 * a.tx + i22 * a.ty))


# ------------------------------------------------------------ fitting

def _fit_affine(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> AffineTransform:
    # similarity-normalize so the conditioning test does not depend on
    # where the points sit in the image
    mu = np.average(src, axis=0, weights=weights)
    spread = np.sqrt(np.average(((src - mu) ** 2).sum(axis=1), weights=weights))
    if spread == 0:
        raise ValueError("correspondence points are coincident")
    u = (src - mu) / spread
    design = np.column_stack([u, np.ones(len(u))])
    sw = np.sqrt(weights)[:, None]
    normal = (design * sw).T @ (design * sw)
    if np.linalg.cond(normal) > COND_LIMIT:
        raise ValueError("correspondence points are collinear or ill-conditioned")
    coef, *_ = np.linalg.lstsq(design * sw, dst * sw, rcond=None)
    # coef rows: [u_x, u_y, 1] -> columns x', y'
    lin = coef[:2].T / spread
    t = coef[2] - lin @ mu
    return AffineTransform(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], t[0], t[1])


def solve_affine(points: Iterable[MatchPoint], weighting: str = "none", *, full_output: bool = False):
    """Least-squares affine taking each valid point's centre to its
    centre + offset.

    Parameters
    ----------
    points : iterable of MatchPoint
        Invalid points are ignored.
    weighting : {"none", "snr"}
        ``"snr"`` weights each point by its SNR.
    full_output : bool
        Also return the (n, 2) residual vectors of the used points.

    Raises
    ------
    ValueError
        Fewer than 3 valid points, or a collinear / ill-conditioned set.
    """
    if weighting not in ("none", "snr"):
        raise ValueError(f"unknown weighting {weighting!r}")
    pts = [p for p in points if p.valid]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 valid points, got {len(pts)}")
    src = np.array([p.center for p in pts], dtype=np.float64)
    dst = src + np.array([p.offset for p in pts], dtype=np.float64)
    if weighting == "snr":
        weights = np.array([p.snr for p in pts], dtype=np.float64)
        if not np.all(weights > 0):
            raise ValueError("snr weighting needs positive SNR on every valid point")
    else:
        weights = np.ones(len(pts))
    fit = _fit_affine(src, dst, weights)
    if full_output:
        return fit, fit.apply(src) - dst
    return fit


# -------------------------------------------------------------- meshes

@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """A rows x cols grid over ``rect = (x0, y0, x1, y1)``, each cell split
    along its upper-left to lower-right diagonal.

    Cell (r, c) holds triangles ``2 * (r * cols + c)`` (upper-right half)
    and ``2 * (r * cols + c) + 1`` (lower-left half). ``affines[k]`` maps
    triangle k's region of the grid frame to the destination frame.
    """

    rect: tuple[float, float, float, float]
    rows: int
    cols: int
    affines: tuple[AffineTransform, ...]
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("mesh needs at least one cell")
        object.__setattr__(self, "affines", tuple(self.affines))
        if len(self.affines) != self.n_triangles:
            raise ValueError(f"expected {self.n_triangles} affines, got {len(self.affines)}")

    @classmethod
    def uniform(cls, rect, rows: int, cols: int, affine: AffineTransform = AffineTransform()) -> "TriangleMesh":
        return cls(tuple(rect), rows, cols, (affine,) * (2 * rows * cols))

    @classmethod
    def for_image(cls, width: int, height: int, rows: int, cols: int,
                  affine: AffineTransform = AffineTransform()) -> "TriangleMesh":
        return cls.uniform(image_rect(width, height), rows, cols, affine)

    @property
    def n_triangles(self) -> int:
        return 2 * self.rows * self.cols

    def control_points(self) -> np.ndarray:
        """(rows + 1, cols + 1, 2) grid vertex positions."""
        x0, y0, x1, y1 = self.rect
        xs = np.linspace(x0, x1, self.cols + 1)
        ys = np.linspace(y0, y1, self.rows + 1)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def triangle_indices(self) -> np.ndarray:
        """(n_triangles, 3) flat vertex indices, counter-clockwise in
        y-down image coordinates (positive signed area)."""
        tris = []
        stride = self.cols + 1
        for r in range(self.rows):
            for c in range(self.cols):
                ul, ur = r * stride + c, r * stride + c + 1
                ll, lr = ul + stride, ur + stride
                tris.append((ul, ur, lr))
                tris.append((ul, lr, ll))
        return np.array(tris, dtype=np.intp)

    def triangles(self) -> np.ndarray:
        """(n_triangles, 3, 2) vertex coordinates in the grid frame."""
        return self.control_points().reshape(-1, 2)[self.triangle_indices()]

    def mapped_triangles(self) -> np.ndarray:
        tri = self.triangles()
        return np.stack([a.apply(t) for a, t in zip(self.affines, tri)])

    def neighbors(self, k: int) -> list[int]:
        return _neighbor_table(self.rows, self.cols)[k]

    def locate(self, pts) -> np.ndarray:
        """Triangle index containing each (x, y) point in the grid frame, or
        -1 outside. Edge ties go to the lower index."""
        return _locate(self.triangles(), np.asarray(pts, dtype=np.float64))

    def with_affines(self, affines: Sequence[AffineTransform], **diag) -> "TriangleMesh":
        return TriangleMesh(self.rect, self.rows, self.cols, tuple(affines), dict(diag))

    def scaled(self, factor: float, offset: float = 0.0) -> "TriangleMesh":
        x0, y0, x1, y1 = self.rect
        rect = (x0 * factor + offset, y0 * factor + offset, x1 * factor + offset, y1 * factor + offset)
        return TriangleMesh(rect, self.rows, self.cols,
                            tuple(a.scaled(factor, offset) for a in self.affines), dict(self.diagnostics))

    def check_orientation(self) -> None:
        src = signed_areas(self.triangles())
        dst = signed_areas(self.mapped_triangles())
        if np.any(src == 0):
            raise ValueError("mesh has a degenerate source triangle")
        bad = np.flatnonzero(np.sign(src) != np.sign(dst))
        if bad.size:
            raise FoldOverError(f"mapped triangles {bad.tolist()} fold over")

    def to_json(self) -> dict:
        return {"rect": list(self.rect), "rows": self.rows, "cols": self.cols,
                "control_points": self.control_points().reshape(-1, 2).tolist(),
                "affines": [a.to_list() for a in self.affines]}

    @classmethod
    def from_json(cls, d: dict) -> "TriangleMesh":
        return cls(tuple(d["rect"]), int(d["rows"]), int(d["cols"]),
                   tuple(AffineTransform.from_list(a) for a in d["affines"]))


def image_rect(width: int, height: int) -> tuple[float, float, float, float]:
    """Outer pixel boundary of a width x height image."""
    return (-0.5, -0.5, width - 0.5, height - 0.5)


def signed_areas(tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


_NEIGHBOR_CACHE: dict[tuple[int, int], list[list[int]]] = {}


def _neighbor_table(rows: int, cols: int) -> list[list[int]]:
    """The six surrounding triangles of every triangle: all triangles that
    share a vertex, ranked by shared-vertex count, then centroid distance,
    then index."""
    key = (rows, cols)
    if key not in _NEIGHBOR_CACHE:
        mesh = TriangleMesh.uniform((0.0, 0.0, float(cols), float(rows)), rows, cols)
        idx = mesh.triangle_indices()
        cent = mesh.triangles().mean(axis=1)
        sets = [set(t) for t in idx.tolist()]
        by_vertex: dict[int, list[int]] = {}
        for k, t in enumerate(idx.tolist()):
            for v in t:
                by_vertex.setdefault(v, []).append(k)
        table = []
        for k, verts in enumerate(sets):
            cands = {j for v in verts for j in by_vertex[v]} - {k}
            ranked = sorted(cands, key=lambda j: (-len(sets[j] & verts),
                                                  round(float(np.hypot(*(cent[j] - cent[k]))), 9), j))
            table.append(ranked[:6])
        _NEIGHBOR_CACHE[key] = table
    return _NEIGHBOR_CACHE[key]


def _inside(tri: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, b, c = tri
    orient = np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    e0 = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
    e1 = (c[0] - b[0]) * (y - b[1]) - (c[1] - b[1]) * (x - b[0])
    e2 = (a[0] - c[0]) * (y - c[1]) - (a[1] - c[1]) * (x - c[0])
    return (orient * e0 >= 0) & (orient * e1 >= 0) & (orient * e2 >= 0)


def _locate(tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.full(len(pts), -1, dtype=np.intp)
    if len(pts) == 0:
        return out
    for k, tri in enumerate(tris):
        free = out < 0
        if not free.any():
            break
        hit = _inside(tri, pts[free, 0], pts[free, 1])
        out[np.flatnonzero(free)[hit]] = k
    return out


def build_mesh(section_rect, grid: tuple[int, int], points: Sequence[MatchPoint],
               weighting: str = "none") -> TriangleMesh:
    """Fit one affine per triangle from the valid points inside the triangle
    and its six surrounding triangles.

    Triangles whose support cannot be solved use the affine fitted to all
    valid points; their indices are listed in ``mesh.diagnostics["fallback"]``.

    Raises
    ------
    ValueError
        Fewer than 3 usable points in the whole section.
    FoldOverError
        The fitted mesh folds over.
    """
    rows, cols = grid
    template = TriangleMesh.uniform(tuple(section_rect), rows, cols)
    valid = [p for p in points if p.valid]
    global_fit = solve_affine(valid, weighting)

    owner = template.locate(np.array([p.center for p in valid]).reshape(-1, 2))
    members: dict[int, list[MatchPoint]] = {}
    for p, k in zip(valid, owner.tolist()):
        if k >= 0:
            members.setdefault(k, []).append(p)

    affines, fallback = [], []
    for k in range(template.n_triangles):
        support = [p for j in [k] + template.neighbors(k) for p in members.get(j, [])]
        try:
            affines.append(solve_affine(support, weighting))
        except ValueError:
            affines.append(global_fit)
            fallback.append(k)
    if fallback:
        logger.debug("mesh: %d of %d triangles fell back to the global affine",
                     len(fallback), template.n_triangles)
    mesh = template.with_affines(affines, fallback=fallback, global_affine=global_fit)
    mesh.check_orientation()
    return mesh


# ----------------------------------------------------------- rendering

def sample_bilinear(pix: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples at (x, y); points outside ``[0, w-1] x [0, h-1]``
    give 0 and are reported as uncovered."""
    h, w = pix.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = pix[y0, x0] * (1 - fx) + pix[y0, x1] * fx
    bot = pix[y1, x0] * (1 - fx) + pix[y1, x1] * fx
    val = top * (1 - fy) + bot * fy
    return np.where(inside, val, 0.0), inside


def _render_pieces(src: Image | np.ndarray, pieces, out_dims) -> Image:
    # pieces: (triangle in output frame or None for everything, output->source affine)
    pix = as_array(src)
    src_cov = getattr(src, "coverage", None)
    w, h = out_dims if out_dims is not None else (pix.shape[1], pix.shape[0])
    out = np.zeros((h, w))
    cov = np.zeros((h, w), dtype=bool)
    owner = np.zeros((h, w), dtype=bool)
    for tri, inv in pieces:
        if tri is None:
            yy, xx = np.mgrid[0:h, 0:w]
            sel = np.ones((h, w), dtype=bool)
            r0 = c0 = 0
        else:
            lo = np.floor(tri.min(axis=0)).astype(int)
            hi = np.ceil(tri.max(axis=0)).astype(int)
            c0, r0 = max(lo[0], 0), max(lo[1], 0)
            c1, r1 = min(hi[0], w - 1), min(hi[1], h - 1)
            if c1 < c0 or r1 < r0:
                continue
            yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
            sel = _inside(tri, xx, yy) & ~owner[r0:r1 + 1, c0:c1 + 1]
        if not sel.any():
            continue
        ty, tx = yy[sel], xx[sel]
        sx = inv.a11 * tx + inv.a12 * ty + inv.tx
        sy = inv.a21 * tx + inv.a22 * ty + inv.ty
        val, inside = sample_bilinear(pix, sx, sy)
        if src_cov is not None:
            # a bilinear sample is covered only if all four taps are
            inside &= _covered_taps(src_cov, sx, sy, inside)
        out[ty, tx] = np.where(inside, val, 0.0)
        cov[ty, tx] = inside
        owner[ty, tx] = True
    return Image(out, coverage=cov)


def _covered_taps(cov: np.ndarray, x: np.ndarray, y: np.ndarray, inside: np.ndarray) -> np.ndarray:
    h, w = cov.shape
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return cov[y0, x0] & cov[y0, x1] & cov[y1, x0] & cov[y1, x1]


def render(src: Image | np.ndarray, warp: AffineTransform | TriangleMesh,
           out_dims: tuple[int, int] | None = None) -> Image:
    """Render ``src`` through a forward warp (source -> output).

    Each output pixel is traced back through the inverse warp and sampled
    bilinearly. For meshes the pixel is assigned to the mapped triangle
    that contains it (lower index wins on shared edges). Pixels that land
    outside the source are 0 with their coverage bit cleared.

    ``out_dims`` is (width, height), defaulting to the source size.
    """
    if isinstance(warp, AffineTransform):
        return _render_pieces(src, [(None, invert(warp))], out_dims)
    mapped = warp.mapped_triangles()
    if np.any(signed_areas(mapped) == 0) or any(abs(a.det) <= DET_TOL for a in warp.affines):
        raise ValueError("mesh has a degenerate triangle")
    return _render_pieces(src, [(t, invert(a)) for t, a in zip(mapped, warp.affines)], out_dims)


def resample(src: Image | np.ndarray, sampling: AffineTransform | TriangleMesh,
             out_dims: tuple[int, int] | None = None) -> Image:
    """Render with a map from output coordinates to source coordinates.

    For a mesh, output pixels are located in the mesh's own grid triangles
    and sampled through that triangle's affine.
    """
    if isinstance(sampling, AffineTransform):
        return _render_pieces(src, [(None, sampling)], out_dims)
    return _render_pieces(src, list(zip(sampling.triangles(), sampling.affines)), out_dims)


# ------------------------------------------------------------ bridging

def _lagrange_weights(xs: Sequence[float], x: float) -> np.ndarray:
    w = np.ones(len(xs))
    for m, xm in enumerate(xs):
        for q, xq in enumerate(xs):
            if q != m:
                w[m] *= (x - xq) / (xm - xq)
    return w


def bridge_gap(chain: Sequence[AffineTransform | None], bad_range: tuple[int, int]) -> list[AffineTransform]:
    """Replace sections ``i..j`` (inclusive) of a per-section affine chain by
    interpolating each of the six parameters across the gap.

    With two good anchors on each side the curve is the cubic through the
    four anchors ``i-2, i-1, j+1, j+2``; across the gap this is a cubic
    Bezier whose end tangents are finite differences of the anchors. With a
    single anchor on either side it degrades to linear interpolation.
    ``None`` entries are treated as missing.

    Raises
    ------
    ValueError
        No usable anchor on one side of the gap.
    """
    i, j = bad_range
    n = len(chain)
    if not 0 <= i <= j < n:
        raise ValueError(f"bad range {bad_range} outside a chain of {n}")

    def anchor(k):
        return chain[k] if 0 <= k < n and chain[k] is not None and not i <= k <= j else None

    left, right = anchor(i - 1), anchor(j + 1)
    if left is None or right is None:
        raise ValueError(f"gap {bad_range} has no anchor on the {'left' if left is None else 'right'}; "
                         "refusing to extrapolate")
    far_left, far_right = anchor(i - 2), anchor(j + 2)
    if far_left is not None and far_right is not None:
        xs = (i - 2, i - 1, j + 1, j + 2)
        ps = np.array([t.params() for t in (far_left, left, right, far_right)])
    else:
        xs = (i - 1, j + 1)
        ps = np.array([left.params(), right.params()])

    out = list(chain)
    for k in range(i, j + 1):
        out[k] = AffineTransform.from_list(_lagrange_weights(xs, k) @ ps)
    return out
