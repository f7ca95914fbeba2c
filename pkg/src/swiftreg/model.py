"""Z-averaged model templates (remod)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .image_io import Image


@dataclass(frozen=True)
class ModelSpec:
    """Window of ``span`` sections centred on the section being modelled.

    ``exclusions`` lists section indices (damaged, skipped, ...) that never
    contribute; ``exclude_self`` drops the centre section itself.
    """

    span: int = 9
    exclude_self: bool = True
    exclusions: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.span < 1 or self.span % 2 == 0:
            raise ValueError(f"model span must be an odd integer >= 1, got {self.span}")
        object.__setattr__(self, "exclusions", frozenset(int(e) for e in self.exclusions))


def contributors(n_sections: int, center: int, spec: ModelSpec) -> list[int]:
    """Indices that feed the model of ``center`` in a stack of ``n_sections``."""
    half = spec.span // 2
    lo, hi = max(center - half, 0), min(center + half, n_sections - 1)
    out = [k for k in range(lo, hi + 1) if k not in spec.exclusions]
    if spec.exclude_self:
        out = [k for k in out if k != center]
    return out


def z_average(images: Sequence[Image]) -> Image:
    """Per-pixel mean over the images that cover each pixel.

    The result does not depend on the order of ``images`` (samples are
    sorted per pixel before summation).
    """
    if not images:
        raise ValueError("nothing to average")
    vals = np.stack([im.pixels for im in images])
    cover = np.stack([np.ones(im.shape, dtype=bool) if im.coverage is None else im.coverage
                      for im in images])
    vals = np.where(cover, vals, 0.0)
    if len(images) > 1:
        vals = np.sort(vals, axis=0)
    total = vals.sum(axis=0)
    count = cover.sum(axis=0)
    covered = count > 0
    mean = np.divide(total, count, out=np.zeros_like(total), where=covered)
    return Image(mean, coverage=None if covered.all() else covered)


def build_model(stack: Sequence[Image | None], center: int, spec: ModelSpec) -> Image:
    """Average the aligned neighbours of section ``center``.

    ``stack`` entries that are ``None`` are treated as excluded.

    Raises
    ------
    ValueError
        No section is left to contribute.
    """
    if not 0 <= center < len(stack):
        raise IndexError(f"center {center} outside a stack of {len(stack)}")
    idx = [k for k in contributors(len(stack), center, spec) if stack[k] is not None]
    if not idx:
        raise ValueError(f"empty contributor set for section {center} (span {spec.span})")
    model = z_average([stack[k] for k in idx])
    ref = stack[center] if stack[center] is not None else stack[idx[0]]
    return Image(model.pixels, section_index=center, level=ref.level, scale=ref.scale,
                 coverage=model.coverage)
