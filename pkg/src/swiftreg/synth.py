"""Synthetic ground-truth stacks and brute-force oracles.

The phantom is a set of ellipsoidal blobs in (x, y, z); section k is the
z = k slice of it, warped by a per-section truth affine, with independent
fine speckle, smooth intensity clutter and Gaussian noise on top.

A truth affine maps raw section coordinates to phantom coordinates, which
is the direction an alignment recovers. Alignment is only defined up to
one common affine (the gauge), so :func:`evaluate_alignment` factors that
out before measuring anything.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .correlate import CorrelationMap
from .image_io import Image, as_array, write_swr
from .transform import AffineTransform, compose, invert, sample_bilinear

DEFECT_TYPES = ("blank", "tear-band", "intensity-drop")

# stream ids for seed derivation
_PHANTOM, _WARP, _SECTION, _DEFECT = 0, 1, 2, 3


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; sections regenerate
    identically no matter which subset is built."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass
class SynthSpec:
    sections: int = 16
    width: int = 512
    height: int = 512
    # blob centres per (100 px)^2 of section area per section of depth
    blob_density: float = 1.5
    blob_radius: tuple[float, float] = (4.0, 14.0)
    blob_z_radius: tuple[float, float] = (2.0, 6.0)
    # share of blobs that run through the whole stack along z (vessels, axons)
    tube_fraction: float = 0.25
    clutter_amplitude: float = 0.04
    clutter_scale: float = 60.0
    speckle_amplitude: float = 0.03
    max_rotation_deg: float = 2.0
    max_scale_dev: float = 0.01
    max_shear: float = 0.02
    max_translation: float = 20.0
    # per-section random-walk step of each warp parameter's rate, as a
    # fraction of its bound
    warp_step: float = 0.03
    noise_sigma: float = 0.05
    damaged: dict[int, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.blob_radius = tuple(self.blob_radius)
        self.blob_z_radius = tuple(self.blob_z_radius)
        self.damaged = {int(k): str(v) for k, v in self.damaged.items()}
        for k, kind in self.damaged.items():
            if kind not in DEFECT_TYPES:
                raise ValueError(f"unknown defect {kind!r} for section {k}")
            if not 0 <= k < self.sections:
                raise ValueError(f"damaged section {k} outside the stack")
        if self.sections < 1:
            raise ValueError("need at least one section")
        if 4 * self.blob_radius[1] >= min(self.width, self.height):
            raise ValueError("image too small for the blob radii")
        if not 0 <= self.tube_fraction <= 1:
            raise ValueError("tube_fraction must lie in [0, 1]")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ValueError("bad blob radius range")

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["damaged"] = {str(k): v for k, v in self.damaged.items()}
        return d

    def margin(self) -> int:
        r = math.hypot(self.width, self.height) / 2
        lin = math.radians(self.max_rotation_deg) + self.max_scale_dev + self.max_shear
        return int(math.ceil(self.max_translation + lin * r)) + 4


@dataclass(frozen=True, eq=False)
class Phantom:
    """Ellipsoidal blobs in canvas coordinates (phantom frame + margin)."""

    centers: np.ndarray   # (n, 3) x, y, z
    radii: np.ndarray     # (n, 3) rx, ry, rz
    angles: np.ndarray    # (n,) in-plane orientation
    amps: np.ndarray      # (n,)
    canvas: tuple[int, int]  # (width, height)
    margin: int

    @classmethod
    def generate(cls, spec: SynthSpec) -> "Phantom":
        rng = rng_for(spec.seed, _PHANTOM)
        m = spec.margin()
        cw, ch = spec.width + 2 * m, spec.height + 2 * m
        zr_max = spec.blob_z_radius[1]
        depth = spec.sections + 2 * zr_max
        n = rng.poisson(spec.blob_density * cw * ch / 1e4 * depth)
        centers = np.column_stack([rng.uniform(0, cw, n), rng.uniform(0, ch, n),
                                   rng.uniform(-zr_max, spec.sections - 1 + zr_max, n)])
        r = rng.uniform(*spec.blob_radius, n)
        elong = rng.uniform(0.6, 1.0, n)
        rz = rng.uniform(*spec.blob_z_radius, n)
        tube = rng.random(n) < spec.tube_fraction
        rz[tube] = 4.0 * (spec.sections + 2 * zr_max)
        radii = np.column_stack([r, r * elong, rz])
        amps = rng.uniform(0.08, 0.25, n) * rng.choice([-1.0, 1.0], n, p=[0.7, 0.3])
        return cls(centers, radii, rng.uniform(0, np.pi, n), amps, (cw, ch), m)

    def slice(self, z: float) -> np.ndarray:
        cw, ch = self.canvas
        dz = (z - self.centers[:, 2]) / self.radii[:, 2]
        act = np.flatnonzero(np.abs(dz) < 1)
        # every active blob evaluated on a common box big enough for the largest
        half = int(np.ceil(self.radii[:, 0].max())) + 1
        off = np.arange(-half, half + 1)
        cx, cy = self.centers[act, 0], self.centers[act, 1]
        x = np.floor(cx).astype(np.intp)[:, None, None] + off[None, None, :]
        y = np.floor(cy).astype(np.intp)[:, None, None] + off[None, :, None]
        c, s = np.cos(self.angles[act])[:, None, None], np.sin(self.angles[act])[:, None, None]
        ddx, ddy = x - cx[:, None, None], y - cy[:, None, None]
        u = (ddx * c + ddy * s) / self.radii[act, 0][:, None, None]
        v = (-ddx * s + ddy * c) / self.radii[act, 1][:, None, None]
        rho2 = u * u + v * v + (dz[act] ** 2)[:, None, None]
        val = self.amps[act][:, None, None] * np.sqrt(np.clip(1.0 - rho2, 0.0, None))
        x, y = np.broadcast_arrays(x, y)
        keep = (val != 0) & (x >= 0) & (x < cw) & (y >= 0) & (y < ch)
        flat = np.bincount(y[keep] * cw + x[keep], weights=val[keep], minlength=cw * ch)
        return 0.5 + flat.reshape(ch, cw)


def smooth_field(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    """Unit-std Gaussian random field with correlation length ``scale``."""
    spec = np.fft.rfft2(rng.standard_normal(shape))
    f = np.fft.irfft2(ndimage.fourier_gaussian(spec, scale, n=shape[1]), s=shape)
    return f / (f.std() or 1.0)


def warp_walk(spec: SynthSpec) -> list[AffineTransform]:
    """Smooth, bounded per-section truth warps.

    Each parameter follows a random walk in its rate of change, so the
    parameter itself varies smoothly along z; values are clamped to the
    declared bounds (the rate reflects on contact).
    """
    rng = rng_for(spec.seed, _WARP)
    bounds = np.array([spec.max_rotation_deg, spec.max_scale_dev, spec.max_shear,
                       spec.max_translation, spec.max_translation])
    value = rng.uniform(-0.5, 0.5, 5) * bounds
    rate = rng.normal(0, 0.1, 5) * bounds
    out = []
    center = ((spec.width - 1) / 2, (spec.height - 1) / 2)
    for _ in range(spec.sections):
        rot, sc, sh, tx, ty = value
        out.append(AffineTransform.from_params(rot, 1.0 + sc, sh, (tx, ty), center))
        rate = rate + rng.normal(0, spec.warp_step, 5) * bounds
        value = value + rate
        over = np.abs(value) > bounds
        value = np.clip(value, -bounds, bounds)
        rate = np.where(over, -0.5 * rate, rate)
    return out


def render_section(spec: SynthSpec, phantom: Phantom, k: int, truth: AffineTransform) -> Image:
    rng = rng_for(spec.seed, _SECTION, k)
    canvas = phantom.slice(float(k))
    canvas += spec.speckle_amplitude * ndimage.gaussian_filter(rng.standard_normal(canvas.shape), 1.0) * 3
    canvas += spec.clutter_amplitude * smooth_field(rng, canvas.shape, spec.clutter_scale)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    p = truth.apply(np.stack([xx, yy], axis=-1)) + phantom.margin
    img, _ = sample_bilinear(canvas, p[..., 0], p[..., 1])
    img = img + spec.noise_sigma * rng.standard_normal(img.shape)

    kind = spec.damaged.get(k)
    if kind == "blank":
        img = np.full(img.shape, 0.5)
    elif kind == "tear-band":
        drng = rng_for(spec.seed, _DEFECT, k)
        band = max(spec.height // 12, 2)
        y0 = int(drng.integers(0, spec.height - band))
        img[y0:y0 + band] = 0.0
    elif kind == "intensity-drop":
        img = img * 0.5
    return Image(np.clip(img, 0.0, 1.0), section_index=k)


@dataclass
class SynthStack:
    manifest: object
    truth: list[AffineTransform]
    images: list[Image]


def generate_stack(spec: SynthSpec, out_dir: str | Path | None = None) -> SynthStack:
    """Build a synthetic stack and its truth transforms.

    When ``out_dir`` is given, sections are written there as ``.swr`` files
    next to ``manifest.json`` and ``truth.json``.
    """
    from .pipeline import SectionEntry, StackManifest  # noqa: avoid import cycle

    phantom = Phantom.generate(spec)
    truth = warp_walk(spec)
    images = [render_section(spec, phantom, k, truth[k]) for k in range(spec.sections)]
    sections = []
    for k in range(spec.sections):
        status = "damaged" if k in spec.damaged else "ok"
        sections.append(SectionEntry(id=k, source_path=f"section_{k:04d}.swr", status=status))
    manifest = StackManifest(sections=sections)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(images):
            write_swr(out / sections[k].source_path, img)
        manifest.save(out / "manifest.json")
        write_truth(out / "truth.json", truth)
    return SynthStack(manifest, truth, images)


def write_truth(path: str | Path, truth: Sequence[AffineTransform]) -> None:
    Path(path).write_text(json.dumps([t.to_list() for t in truth], indent=1))


def read_truth(path: str | Path) -> list[AffineTransform]:
    return [AffineTransform.from_list(v) for v in json.loads(Path(path).read_text())]


# ------------------------------------------------------------- oracles

def brute_force_correlate(a: Image | np.ndarray, b: Image | np.ndarray, max_dim: int = 64) -> CorrelationMap:
    """Direct cyclic cross-correlation of the mean-subtracted inputs.

    ``out[k] = sum_x a[x] * b[x + k]`` laid out with zero offset at the
    centre, which puts the peak at the displacement of b relative to a.
    """
    pa, pb = as_array(a), as_array(b)
    if pa.shape != pb.shape:
        raise ValueError("inputs differ in shape")
    h, w = pa.shape
    if h > max_dim or w > max_dim:
        raise ValueError(f"brute force limited to {max_dim}x{max_dim}, got {w}x{h}")
    pa = pa - pa.mean()
    pb = pb - pb.mean()
    cy, cx = h // 2, w // 2
    out = np.empty((h, w))
    rows, cols = np.arange(h), np.arange(w)
    for ky in range(-cy, h - cy):
        shifted_rows = pb[(rows + ky) % h]
        for kx in range(-cx, w - cx):
            out[cy + ky, cx + kx] = np.sum(pa * shifted_rows[:, (cols + kx) % w])
    return CorrelationMap(out)


@dataclass(frozen=True)
class AlignmentStats:
    per_section: np.ndarray
    mean: float
    max: float
    rms: float
    gauge: AffineTransform


def _corners(width: int, height: int) -> np.ndarray:
    return np.array([[0, 0], [width - 1, 0], [0, height - 1], [width - 1, height - 1]], dtype=np.float64)


def evaluate_alignment(recovered: Sequence[AffineTransform], truth: Sequence[AffineTransform],
                       dims: tuple[int, int], gauge: str = "best",
                       reference: int = 0, include: Sequence[int] | None = None) -> AlignmentStats:
    """Per-section corner residuals after factoring out the common gauge.

    For section i the discrepancy is ``D_i = F_i^-1 . G . T_i`` (raw frame to
    raw frame), where ``F_i`` is the recovered and ``T_i`` the truth
    transform and ``G`` the gauge; the residual is the mean displacement of
    ``D_i`` over the four image corners, in raw pixels. ``gauge="best"``
    fits ``G`` by least squares over ``include`` sections; ``gauge="first"``
    pins it to section ``reference`` (``G = F_ref . T_ref^-1``).

    Applying the same affine on the left of both lists leaves the result
    unchanged.
    """
    if len(recovered) != len(truth):
        raise ValueError("recovered and truth lists differ in length")
    for t in truth:
        if abs(t.det) <= 1e-6:
            raise ValueError("singular truth transform")
    idx = list(range(len(truth))) if include is None else list(include)
    corners = _corners(*dims)

    if gauge == "first":
        g = compose(recovered[reference], invert(truth[reference]))
    elif gauge == "best":
        rows, rhs = [], []
        for i in idx:
            m = invert(recovered[i]).linear
            target = recovered[i].apply(corners)
            for y, f in zip(truth[i].apply(corners), target):
                jac = np.array([[y[0], y[1], 0, 0, 1, 0], [0, 0, y[0], y[1], 0, 1]])
                rows.append(m @ jac)
                rhs.append(m @ f)
        p, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        g = AffineTransform.from_list(p)
    else:
        raise ValueError(f"unknown gauge mode {gauge!r}")

    per = np.zeros(len(truth))
    for i in range(len(truth)):
        d = compose(invert(recovered[i]), compose(g, truth[i]))
        per[i] = np.linalg.norm(d.apply(corners) - corners, axis=1).mean()
    sel = per[idx]
    return AlignmentStats(per, float(sel.mean()), float(sel.max()), float(np.sqrt((sel ** 2).mean())), g)


# ---------------------------------------------------- clutter benchmark

def clutter_pair(seed: int, size: int = 128, max_shift: int = 12, clutter_amplitude: float = 4.0,
                 clutter_scale: float = 10.0, pattern_scale: float = 2.0,
                 noise_sigma: float = 0.8) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """A patch pair sharing a mid-frequency pattern at a known offset, each
    buried under its own strong low-frequency clutter and white noise.

    Returns ``(a, b, (dx, dy))`` with b's pattern displaced by (dx, dy).
    """
    rng = rng_for(seed, 7)
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
    pad = max_shift + 1
    big = size + 2 * pad
    raw = rng.standard_normal((big, big))
    pattern = ndimage.gaussian_filter(raw, pattern_scale * 0.5) - ndimage.gaussian_filter(raw, pattern_scale * 2)
    pattern /= pattern.std()
    a = pattern[pad:pad + size, pad:pad + size].copy()
    # content that sits at +d in b was at x in a: b[y, x] = a-pattern[y - dy, x - dx]
    b = pattern[pad - dy:pad - dy + size, pad - dx:pad - dx + size].copy()
    a += clutter_amplitude * smooth_field(rng, (size, size), clutter_scale)
    b += clutter_amplitude * smooth_field(rng, (size, size), clutter_scale)
    a += noise_sigma * rng.standard_normal((size, size))
    b += noise_sigma * rng.standard_normal((size, size))
    return a, b, (dx, dy)
