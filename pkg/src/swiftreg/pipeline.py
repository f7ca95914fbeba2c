"""Iterative multi-resolution stack alignment, manifest and configuration.

Every section carries a chain of per-level transforms. An affine entry maps
raw section pixels to the aligned frame at that level's resolution. A mesh
entry is stored in sampling form: its grid lives in the aligned frame and
each triangle's affine maps aligned coordinates back into the raw section.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .correlate import DEFAULT_EXCLUSION, DEFAULT_TAPER, MatchPoint, WhiteningParams, grid_match
from .image_io import Image, PyramidSpec, build_pyramid, load_image, save_image, write_swr
from .model import ModelSpec, build_model, contributors
from .transform import (AffineTransform, FoldOverError, TriangleMesh, bridge_gap, build_mesh,
                        compose, image_rect, invert, render, resample, solve_affine)

logger = logging.getLogger(__name__)

STATUSES = ("ok", "damaged", "skipped", "interpolated")


class AlignmentError(RuntimeError):
    """Sections could not be matched at all."""

    def __init__(self, section_ids: Sequence[int], message: str = ""):
        self.section_ids = list(section_ids)
        super().__init__(message or f"no valid matches for sections {self.section_ids}")


# ------------------------------------------------------------ manifest

@dataclass
class ChainEntry:
    level: int
    transform: AffineTransform | TriangleMesh

    def to_json(self) -> dict:
        if isinstance(self.transform, TriangleMesh):
            return {"level": self.level, "mesh": self.transform.to_json()}
        return {"level": self.level, "affine": self.transform.to_list()}

    @classmethod
    def from_json(cls, d: dict) -> "ChainEntry":
        if "mesh" in d:
            return cls(int(d["level"]), TriangleMesh.from_json(d["mesh"]))
        return cls(int(d["level"]), AffineTransform.from_list(d["affine"]))


@dataclass
class SectionEntry:
    id: int
    source_path: str = ""
    status: str = "ok"
    transform_chain: list[ChainEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"section {self.id}: unknown status {self.status!r}")

    def top(self) -> ChainEntry | None:
        return self.transform_chain[-1] if self.transform_chain else None

    def transform_at(self, level: int) -> AffineTransform | TriangleMesh | None:
        for e in reversed(self.transform_chain):
            if e.level == level:
                return e.transform
        return None


@dataclass
class StackManifest:
    sections: list[SectionEntry]
    levels: PyramidSpec | None = None
    global_constraint: AffineTransform | None = None
    completed_levels: list[int] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    path: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ids = [s.id for s in self.sections]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("section ids must be strictly increasing")

    @property
    def base_dir(self) -> Path:
        return self.path.parent if self.path is not None else Path(".")

    def statuses(self) -> list[str]:
        return [s.status for s in self.sections]

    def to_json(self) -> dict:
        return {
            "sections": [{"id": s.id, "source_path": s.source_path, "status": s.status,
                          "transform_chain": [e.to_json() for e in s.transform_chain]}
                         for s in self.sections],
            "levels": None if self.levels is None else list(self.levels.factors),
            "global_constraint": None if self.global_constraint is None else self.global_constraint.to_list(),
            "completed_levels": list(self.completed_levels),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, d: dict, path: Path | None = None) -> "StackManifest":
        sections = [SectionEntry(int(s["id"]), s.get("source_path", ""), s.get("status", "ok"),
                                 [ChainEntry.from_json(e) for e in s.get("transform_chain", [])])
                    for s in d["sections"]]
        levels = PyramidSpec(tuple(d["levels"])) if d.get("levels") else None
        gc = d.get("global_constraint")
        return cls(sections, levels, AffineTransform.from_list(gc) if gc else None,
                   [int(x) for x in d.get("completed_levels", [])], d.get("diagnostics", {}), path)

    def save(self, path: str | Path | None = None) -> Path:
        """Write the manifest atomically (temporary file, then rename)."""
        path = Path(path) if path is not None else self.path
        if path is None:
            raise ValueError("manifest has no path to save to")
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_json(), indent=1, sort_keys=True)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=path.parent)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
        self.path = path
        return path

    @classmethod
    def load(cls, path: str | Path) -> "StackManifest":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path)

    def load_images(self) -> list[Image | None]:
        out = []
        for s in self.sections:
            if s.status == "skipped":
                out.append(None)
                continue
            p = Path(s.source_path)
            out.append(load_image(p if p.is_absolute() else self.base_dir / p, s.id))
        return out


def default_pyramid(width: int, height: int) -> PyramidSpec:
    """Halve until the longer side would drop below 128 (at least once),
    keeping the shorter side at 64 or more."""
    factors, side = [], max(width, height)
    while side // 2 >= 128 or not factors:
        if factors and min(width, height) // (2 ** (len(factors) + 1)) < 64:
            break
        factors.append(2)
        side //= 2
    return PyramidSpec(tuple(factors))


# -------------------------------------------------------------- config

@dataclass
class AlignConfig:
    """Alignment settings. Per-level schedules run coarsest level first and
    their last entry repeats; a ``span`` entry may itself be a list giving
    one span per iteration. ``mesh_levels`` holds pyramid level indices
    (0 = full resolution)."""

    whitening: float = 0.7
    taper_frac: float = DEFAULT_TAPER
    grid: list = field(default_factory=lambda: [[4, 4]])
    patch: list = field(default_factory=lambda: [64, 96, 128, 256])
    # the coarsest model spans the whole stack so no block of sections can
    # settle on its own; narrower windows then sharpen the finer levels
    span: list = field(default_factory=lambda: [31, 15, 9, 7])
    snr_stop_rel: float = 0.01
    max_iters_per_level: int = 8
    min_iters_per_level: int = 2
    snr_accept: float = 6.0
    mesh_levels: list = field(default_factory=list)
    mesh_grid: list = field(default_factory=lambda: [4, 4])
    max_offset_frac: float = 0.25
    content_floor: float = 0.01
    exclusion_radius: int = DEFAULT_EXCLUSION
    eps_frac: float = 1e-6
    weighting: str = "snr"
    jump_detect: bool = True
    jump_min_px: float = 4.0
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.snr_accept <= 0:
            raise ValueError("snr_accept must be positive")
        if self.max_iters_per_level < 1 or self.min_iters_per_level < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.weighting not in ("none", "snr"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        WhiteningParams(self.whitening, self.eps_frac)
        if not 0 <= self.taper_frac <= 0.5:
            raise ValueError("taper_frac must lie in [0, 0.5]")
        spans = [s for entry in self.span for s in (entry if isinstance(entry, list) else [entry])]
        if not spans or any(s < 1 or s % 2 == 0 for s in spans):
            raise ValueError(f"spans must be odd integers >= 1, got {self.span}")
        if any(b > a for a, b in zip(spans, spans[1:])):
            raise ValueError(f"span schedule must be non-increasing, got {self.span}")

    @staticmethod
    def _pick(schedule: list, i: int):
        return schedule[min(i, len(schedule) - 1)]

    def grid_for(self, step: int) -> tuple[int, int]:
        g = self._pick(self.grid, step)
        return (int(g[0]), int(g[1]))

    def patch_for(self, step: int) -> int:
        return int(self._pick(self.patch, step))

    def span_for(self, step: int, iteration: int) -> int:
        s = self._pick(self.span, step)
        return int(s[min(iteration, len(s) - 1)] if isinstance(s, list) else s)

    @classmethod
    def from_json(cls, d: dict) -> "AlignConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "AlignConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------- level helpers

def level_coords(factor: float) -> tuple[float, float]:
    """(scale, offset) taking coordinates at one level to a level ``factor``
    times finer: pixel x covers fine pixels ``factor * x .. factor * x + factor - 1``."""
    return factor, (factor - 1) / 2.0


def rescale_transform(t: AffineTransform | TriangleMesh, factor: float):
    """Re-express a transform in the coordinates of a level ``factor`` times finer."""
    scale, offset = level_coords(factor)
    return t.scaled(scale, offset)


def forward_affine(t: AffineTransform | TriangleMesh) -> AffineTransform:
    """Best affine summary (raw -> aligned) of a chain entry."""
    if isinstance(t, AffineTransform):
        return t
    tris = t.triangles()
    pts = tris.reshape(-1, 2)
    mapped = np.concatenate([a.apply(tri) for a, tri in zip(t.affines, tris)])
    # mapped raw points -> aligned grid points
    mps = [MatchPoint(tuple(m), tuple(p - m), 1.0, True) for m, p in zip(mapped, pts)]
    return solve_affine(mps)


def sampling_mesh(t: AffineTransform | TriangleMesh, dims: tuple[int, int], grid: tuple[int, int]) -> TriangleMesh:
    if isinstance(t, TriangleMesh):
        return t
    return TriangleMesh.for_image(dims[0], dims[1], grid[0], grid[1], invert(t))


def warp_section(img: Image, t: AffineTransform | TriangleMesh) -> Image:
    out = render(img, t) if isinstance(t, AffineTransform) else resample(img, t)
    return Image(out.pixels, section_index=img.section_index, level=img.level, scale=img.scale,
                 coverage=out.coverage)


@dataclass
class LevelIteration:
    transforms: list
    section_snr: list[float]
    median_snr: float
    n_valid: list[int]
    residual_rms: list[float]
    contributor_counts: list[int]
    low_confidence: list[int]
    fallback: list[int]


def _median_ok(values: Sequence[float], ok: Sequence[int]) -> float:
    vals = [values[i] for i in ok]
    return float(np.median(vals)) if vals else 0.0


def iterate_level(images: Sequence[Image | None], transforms: Sequence, statuses: Sequence[str],
                  level: int, cfg: AlignConfig, step: int = 0, iteration: int = 0,
                  rendered: Sequence[Image | None] | None = None) -> LevelIteration:
    """One match -> solve -> update pass over every ok section.

    All models are built from the renders of the incoming transforms, and
    all updates are applied together at the end (bulk synchronous).
    """
    n = len(images)
    ok = [i for i in range(n) if statuses[i] == "ok" and images[i] is not None]
    if rendered is None:
        rendered = render_stack(images, transforms, ok, cfg.workers)
    span = cfg.span_for(step, iteration)
    spec = ModelSpec(span, True, frozenset(i for i in range(n) if i not in ok))
    grid = cfg.grid_for(step)
    ref = images[ok[0]] if ok else None
    dims = (ref.width, ref.height) if ref is not None else (0, 0)
    patch = min(cfg.patch_for(step), (min(dims) // 2) * 2)
    params = WhiteningParams(cfg.whitening, cfg.eps_frac)
    use_mesh = level in cfg.mesh_levels

    out_t = list(transforms)
    snr = [0.0] * n
    n_valid = [0] * n
    resid = [float("nan")] * n
    counts = [0] * n
    fallback: list[int] = []

    def work(i):
        model = build_model(rendered, i, spec)
        pts = grid_match(model, rendered[i], grid, patch, params, cfg.taper_frac,
                         cfg.max_offset_frac * patch, cfg.content_floor, cfg.exclusion_radius)
        return i, model, pts

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, ok))
    else:
        results = [work(i) for i in ok]

    for i, _model, pts in results:
        counts[i] = len([k for k in contributors(n, i, spec) if rendered[k] is not None])
        valid = [p for p in pts if p.valid]
        n_valid[i] = len(valid)
        snr[i] = float(np.median([p.snr for p in valid])) if valid else 0.0
        try:
            corr, res = solve_affine(valid, cfg.weighting, full_output=True)
        except ValueError as exc:
            logger.debug("level %d section %d: no update (%s)", level, i, exc)
            continue
        resid[i] = float(np.sqrt((res ** 2).sum(axis=1).mean()))
        if use_mesh:
            try:
                mesh = build_mesh(image_rect(*dims), tuple(cfg.mesh_grid), pts, cfg.weighting)
                base = sampling_mesh(out_t[i], dims, tuple(cfg.mesh_grid))
                out_t[i] = base.with_affines([compose(s, c) for s, c in zip(base.affines, mesh.affines)])
                continue
            except FoldOverError:
                fallback.append(i)
            except ValueError:
                fallback.append(i)
            base = sampling_mesh(out_t[i], dims, tuple(cfg.mesh_grid))
            out_t[i] = base.with_affines([compose(s, corr) for s in base.affines])
        elif isinstance(out_t[i], TriangleMesh):
            out_t[i] = compose(invert(corr), forward_affine(out_t[i]))
        else:
            out_t[i] = compose(invert(corr), out_t[i])

    low = [i for i in ok if snr[i] < cfg.snr_accept]
    return LevelIteration(out_t, snr, _median_ok(snr, ok), n_valid, resid, counts, low, fallback)


def render_stack(images: Sequence[Image | None], transforms: Sequence, which: Sequence[int],
                 workers: int = 1) -> list[Image | None]:
    out: list[Image | None] = [None] * len(images)

    def one(i):
        return i, warp_section(images[i], transforms[i])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(one, which))
    else:
        done = [one(i) for i in which]
    for i, img in done:
        out[i] = img
    return out


def detect_jumps(transforms: Sequence, ok: Sequence[int], dims: tuple[int, int],
                 min_px: float) -> list[int]:
    """Sections whose centre displacement departs from the median of their
    ok neighbours within +-2 by more than 3 MAD (and ``min_px``)."""
    center = np.array([(dims[0] - 1) / 2, (dims[1] - 1) / 2])
    disp = {i: forward_affine(transforms[i]).apply(center) - center for i in ok}
    okset = set(ok)
    out = []
    for i in ok:
        nb = [disp[j] for j in range(i - 2, i + 3) if j != i and j in okset]
        if len(nb) < 3:
            continue
        nb = np.array(nb)
        med = np.median(nb, axis=0)
        mad = np.median(np.linalg.norm(nb - med, axis=1))
        dev = np.linalg.norm(disp[i] - med)
        if dev > 3 * mad and dev > min_px:
            out.append(i)
    return out


def bridge_sections(transforms: list, bad: Sequence[int]) -> tuple[list, list[int]]:
    """Spline every run of consecutive ``bad`` sections; returns the new
    transforms and the sections actually bridged."""
    chain = [None if (t is None or i in bad) else forward_affine(t) for i, t in enumerate(transforms)]
    out = list(transforms)
    bridged = []
    runs, run = [], []
    for i in sorted(bad):
        if run and i != run[-1] + 1:
            runs.append(run)
            run = []
        run.append(i)
    if run:
        runs.append(run)
    for run in runs:
        try:
            chain = bridge_gap(chain, (run[0], run[-1]))
        except ValueError as exc:
            logger.warning("cannot bridge sections %s: %s", run, exc)
            continue
        for i in run:
            out[i] = chain[i]
            bridged.append(i)
    return out, bridged


def apply_constraint(manifest: StackManifest, constraint: AffineTransform) -> StackManifest:
    """Left-compose a full-resolution constraint onto each section's latest
    transform (and onto the initial transforms of a fresh alignment)."""
    if abs(constraint.det) <= 1e-6:
        raise ValueError("constraint transform is singular")
    manifest.global_constraint = (constraint if manifest.global_constraint is None
                                  else compose(constraint, manifest.global_constraint))
    for s in manifest.sections:
        top = s.top()
        if top is None:
            continue
        scale = manifest.levels.scales()[top.level] if manifest.levels else 1
        k = rescale_transform(constraint, 1.0 / scale) if scale != 1 else constraint
        if isinstance(top.transform, TriangleMesh):
            raise ValueError(f"section {s.id}: constraints cannot be applied on top of a mesh")
        top.transform = compose(k, top.transform)
    return manifest


# --------------------------------------------------------------- driver

def align_stack(manifest: StackManifest, cfg: AlignConfig,
                images: Sequence[Image | None] | None = None,
                work_dir: str | Path | None = None) -> StackManifest:
    """Align a stack coarse to fine, iterating each level until the stack
    median SNR changes by less than ``cfg.snr_stop_rel`` (relative).

    ``images`` may supply the full-resolution sections in manifest order;
    otherwise they are loaded from the manifest's source paths. The
    manifest is updated in place (and saved after every level if it has a
    path) and returned.
    """
    if images is None:
        images = manifest.load_images()
    images = list(images)
    n = len(manifest.sections)
    if len(images) != n:
        raise ValueError(f"{len(images)} images for {n} sections")
    present = [im for im, s in zip(images, manifest.sections) if im is not None and s.status != "skipped"]
    if not present:
        raise ValueError("no sections to align")
    w0, h0 = present[0].width, present[0].height
    if manifest.levels is None:
        manifest.levels = default_pyramid(w0, h0)
    spec = manifest.levels
    spec.check_dims(w0, h0, 16)
    scales = spec.scales()
    pyramids = [None if im is None or s.status == "skipped" else build_pyramid(im, spec)
                for im, s in zip(images, manifest.sections)]

    statuses = [s.status for s in manifest.sections]
    # damaged / interpolated sections from a previous run are re-bridged
    statuses = ["damaged" if st == "interpolated" else st for st in statuses]
    levels = list(range(spec.n_levels - 1, -1, -1))
    diag = manifest.diagnostics.setdefault("levels", {})
    transforms: list = []
    work = Path(work_dir) if work_dir is not None else None

    for step, level in enumerate(levels):
        lvl_images = [None if p is None else p[level] for p in pyramids]
        dims = (lvl_images[_first(lvl_images)].width, lvl_images[_first(lvl_images)].height)
        if step == 0:
            init = AffineTransform.identity()
            if manifest.global_constraint is not None:
                s = scales[level]
                init = rescale_transform(manifest.global_constraint, 1.0 / s) if s != 1 else manifest.global_constraint
            transforms = [None if p is None else init for p in pyramids]
        else:
            f = scales[levels[step - 1]] / scales[level]
            transforms = [None if t is None else rescale_transform(t, f) for t in transforms]
            if level not in cfg.mesh_levels:
                transforms = [None if t is None else forward_affine(t) for t in transforms]

        ok = [i for i in range(n) if statuses[i] == "ok" and lvl_images[i] is not None]
        history: list[float] = []
        last: LevelIteration | None = None
        for it in range(cfg.max_iters_per_level):
            rendered = render_stack(lvl_images, transforms, ok, cfg.workers)
            if work is not None:
                _cache(work, level, it, rendered)
            last = iterate_level(lvl_images, transforms, statuses, level, cfg, step, it, rendered)
            transforms = last.transforms
            history.append(last.median_snr)
            logger.info("level %d iter %d: median SNR %.2f", level, it, last.median_snr)
            if it + 1 >= cfg.min_iters_per_level and len(history) > 1:
                prev = history[-2]
                # a dip is not convergence: models refresh between iterations
                if abs(last.median_snr - prev) < cfg.snr_stop_rel * abs(prev):
                    break

        if step == 0:
            dead = [manifest.sections[i].id for i in ok if last.n_valid[i] == 0]
            if dead:
                raise AlignmentError(dead)

        jumps: list[int] = []
        if cfg.jump_detect:
            jumps = detect_jumps(transforms, ok, dims, cfg.jump_min_px / scales[level])
        bad = [i for i in range(n) if statuses[i] == "damaged" and transforms[i] is not None] + jumps
        transforms, bridged = bridge_sections(transforms, sorted(set(bad)))
        for i in jumps:
            if i in bridged:
                statuses[i] = "damaged"
        for i, s in enumerate(manifest.sections):
            if transforms[i] is None:
                continue
            s.transform_chain.append(ChainEntry(level, transforms[i]))
            if i in bridged:
                s.status = "interpolated"
        manifest.completed_levels.append(level)
        diag[str(level)] = {
            "iterations": len(history),
            "median_snr": history,
            "section_snr": last.section_snr,
            "valid_matches": last.n_valid,
            "residual_rms": [None if np.isnan(r) else r for r in last.residual_rms],
            "contributors": last.contributor_counts,
            "low_confidence": [manifest.sections[i].id for i in last.low_confidence],
            "mesh_fallback": [manifest.sections[i].id for i in last.fallback],
            "jumps": [manifest.sections[i].id for i in jumps],
            "interpolated": [manifest.sections[i].id for i in bridged],
        }
        if manifest.path is not None:
            manifest.save()
    return manifest


def _first(items) -> int:
    return next(i for i, x in enumerate(items) if x is not None)


def _cache(work: Path, level: int, it: int, rendered) -> None:
    d = work / f"level{level}" / f"iter{it:02d}"
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(rendered):
        if img is not None:
            write_swr(d / f"section_{i:04d}.swr", img)


def final_transforms(manifest: StackManifest, level: int | None = None) -> list[AffineTransform | TriangleMesh | None]:
    """Transforms at ``level`` (default: the finest completed level)."""
    if not manifest.completed_levels:
        raise ValueError("manifest has no completed level")
    if level is None:
        level = min(manifest.completed_levels)
    return [s.transform_at(level) for s in manifest.sections]


# -------------------------------------------------------------- report

def cut_planes(aligned: Sequence[Image | None], row: int | None = None,
               col: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """XZ (one image row per section) and YZ (one column per section) cuts
    through an aligned stack; missing sections are skipped."""
    imgs = [im for im in aligned if im is not None]
    h, w = imgs[0].shape
    row = h // 2 if row is None else row
    col = w // 2 if col is None else col
    xz = np.stack([im.pixels[row, :] for im in imgs])
    yz = np.stack([im.pixels[:, col] for im in imgs])
    return xz, yz


def discontinuity_profile(cut: np.ndarray) -> np.ndarray:
    """Mean absolute difference between successive rows of a cut plane."""
    return np.abs(np.diff(cut, axis=0)).mean(axis=1)


def report(manifest: StackManifest, out_dir: str | Path | None = None,
           images: Sequence[Image | None] | None = None) -> dict:
    """Diagnostics for the finest completed level: SNR / residual tables,
    low-confidence and interpolated sections, and XZ / YZ cut planes.

    With ``out_dir`` the tables go to ``report.json`` and the cuts to
    ``cut_xz.pgm`` / ``cut_yz.pgm``.
    """
    if not manifest.completed_levels:
        raise ValueError("no completed level to report on")
    level = min(manifest.completed_levels)
    if images is None:
        images = manifest.load_images()
    spec = manifest.levels
    transforms = final_transforms(manifest, level)
    aligned = []
    for s, im, t in zip(manifest.sections, images, transforms):
        if im is None or t is None or s.status == "skipped":
            aligned.append(None)
            continue
        lvl = build_pyramid(im, spec)[level] if level > 0 else im
        aligned.append(warp_section(lvl, t))
    xz, yz = cut_planes(aligned)
    ld = manifest.diagnostics.get("levels", {}).get(str(level), {})
    ids = [s.id for s in manifest.sections]
    table = [{"id": s.id, "status": s.status,
              "snr": (ld.get("section_snr") or [None] * len(ids))[k],
              "residual_rms": (ld.get("residual_rms") or [None] * len(ids))[k],
              "valid_matches": (ld.get("valid_matches") or [None] * len(ids))[k]}
             for k, s in enumerate(manifest.sections)]
    bundle = {
        "level": level,
        "sections": table,
        "low_confidence": list(ld.get("low_confidence", [])),
        "interpolated": [s.id for s in manifest.sections if s.status == "interpolated"],
        "median_snr_history": {k: v.get("median_snr") for k, v in manifest.diagnostics.get("levels", {}).items()},
        "xz_discontinuity": discontinuity_profile(xz).tolist(),
        "yz_discontinuity": discontinuity_profile(yz).tolist(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(bundle, indent=1, sort_keys=True))
        save_image(out / "cut_xz.pgm", xz)
        save_image(out / "cut_yz.pgm", yz)
    bundle["cut_xz"] = xz
    bundle["cut_yz"] = yz
    return bundle
