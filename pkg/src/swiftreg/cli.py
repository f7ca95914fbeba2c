"""Command line front end: ``swiftreg <command> ...``.

Exit codes: 0 success, 1 other failures, 2 bad arguments or configuration,
3 alignment failure (offending section ids on stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .correlate import MatchPoint, WhiteningParams, grid_match
from .image_io import PyramidSpec, build_pyramid, convert_depth, load_image, read_pgm, save_image
from .model import ModelSpec, build_model
from .pipeline import (AlignConfig, AlignmentError, StackManifest, align_stack, apply_constraint,
                       final_transforms, report, warp_section)
from .synth import SynthSpec, generate_stack, write_truth
from .transform import AffineTransform, build_mesh, image_rect, resample, solve_affine

logger = logging.getLogger("swiftreg")

EXIT_CONFIG = 2
EXIT_ALIGN = 3


class ConfigError(Exception):
    pass


def _grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}")
    return rows, cols


def _int_list(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


# ------------------------------------------------------------ commands

def cmd_icon(args) -> int:
    raw, _ = read_pgm(args.inp)
    img = convert_depth(raw, args.clip_lo, args.clip_hi)
    save_image(args.out, img)
    return 0


def cmd_iscale(args) -> int:
    img = load_image(args.inp)
    spec = PyramidSpec(tuple(args.factors))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.inp)
    for level in build_pyramid(img, spec):
        path = out / f"{src.stem}_L{level.level}{src.suffix or '.swr'}"
        save_image(path, level)
        logger.info("level %d (%dx%d) -> %s", level.level, level.width, level.height, path)
    return 0


def cmd_swim(args) -> int:
    model, target = load_image(args.model), load_image(args.target)
    points = grid_match(model, target, args.grid, args.patch,
                        WhiteningParams(args.whiten), args.taper, args.max_offset,
                        args.content_floor, workers=args.workers)
    Path(args.out).write_text(json.dumps([p.to_json() for p in points], indent=1))
    n_ok = sum(p.valid for p in points)
    logger.info("%d of %d patches matched", n_ok, len(points))
    return 0


def cmd_mir(args) -> int:
    src = load_image(args.inp)
    points = [MatchPoint.from_json(d) for d in json.loads(Path(args.matches).read_text())]
    # matches run model -> target, so they already map output pixels to source pixels
    if args.mode == "affine":
        sampling = solve_affine(points, args.weighting)
    else:
        sampling = build_mesh(image_rect(src.width, src.height), args.grid, points, args.weighting)
    save_image(args.out, resample(src, sampling))
    return 0


def cmd_remod(args) -> int:
    manifest = StackManifest.load(args.stack)
    images = manifest.load_images()
    transforms = final_transforms(manifest, 0) if manifest.completed_levels else [None] * len(images)
    stack = [None if im is None else (warp_section(im, t) if t is not None else im)
             for im, t in zip(images, transforms)]
    exclusions = set(args.exclude) | {s.id for s in manifest.sections if s.status != "ok"}
    exclusions.discard(args.center)
    ids = [s.id for s in manifest.sections]
    if args.center not in ids:
        raise ConfigError(f"section {args.center} not in the manifest")
    spec = ModelSpec(args.span, True, frozenset(ids.index(e) for e in exclusions if e in ids))
    save_image(args.out, build_model(stack, ids.index(args.center), spec))
    return 0


def cmd_align(args) -> int:
    try:
        cfg = AlignConfig.load(args.config) if args.config else AlignConfig()
        if args.workers is not None:
            cfg.workers = args.workers
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.__post_init__()
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    manifest = StackManifest.load(args.manifest)
    if args.constraint is not None:
        apply_constraint(manifest, AffineTransform.from_list(args.constraint))
    try:
        align_stack(manifest, cfg)
    except AlignmentError as exc:
        print("alignment failed for sections: " + " ".join(str(i) for i in exc.section_ids),
              file=sys.stderr)
        return EXIT_ALIGN
    manifest.save()
    return 0


def cmd_report(args) -> int:
    manifest = StackManifest.load(args.manifest)
    summary = report(manifest, args.out_dir)
    logger.info("report written to %s", args.out_dir)
    if args.print:
        print(json.dumps({k: v for k, v in summary.items() if not k.startswith("cut_")}, indent=1))
    return 0


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec.from_json(json.loads(Path(args.spec).read_text())) if args.spec else SynthSpec()
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad synth spec: {exc}") from exc
    stack = generate_stack(spec, args.out_dir)
    if args.truth:
        write_truth(args.truth, stack.truth)
    return 0


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swiftreg", description="Serial-section image registration.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("icon", help="convert a 16-bit PGM to normalized float")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True, help=".pgm (8-bit) or .swr (float)")
    s.add_argument("--clip-lo", type=float, default=0.5, help="low percentile clip")
    s.add_argument("--clip-hi", type=float, default=99.5, help="high percentile clip")
    s.set_defaults(func=cmd_icon)

    s = sub.add_parser("iscale", help="build a resolution pyramid")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--factors", type=_int_list, default=[2, 2], help="e.g. 2,2,3")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_iscale)

    s = sub.add_parser("swim", help="whitened patch matching of a target against a model")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--whiten", type=float, default=0.7)
    s.add_argument("--taper", type=float, default=0.125)
    s.add_argument("--grid", type=_grid, default=(4, 4))
    s.add_argument("--patch", type=int, default=512)
    s.add_argument("--max-offset", type=float, default=64)
    s.add_argument("--content-floor", type=float, default=0.01)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="matches JSON")
    s.set_defaults(func=cmd_swim)

    s = sub.add_parser("mir", help="render an image through fitted matches")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--matches", required=True)
    s.add_argument("--mode", choices=("affine", "mesh"), default="affine")
    s.add_argument("--grid", type=_grid, default=(8, 8))
    s.add_argument("--weighting", choices=("none", "snr"), default="snr")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mir)

    s = sub.add_parser("remod", help="Z-averaged model of a section's aligned neighbours")
    s.add_argument("--stack", required=True, help="manifest JSON")
    s.add_argument("--center", type=int, required=True, help="section id")
    s.add_argument("--span", type=int, default=9)
    s.add_argument("--exclude", type=_int_list, default=[], help="section ids, comma separated")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_remod)

    s = sub.add_parser("align", help="iterative coarse-to-fine stack alignment")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="AlignConfig JSON (defaults if omitted)")
    s.add_argument("--constraint", type=float, nargs=6, metavar="A",
                   help="a11 a12 a21 a22 tx ty applied to every section")
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("report", help="cut planes and per-section summary")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--print", action="store_true", help="also print the summary JSON")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="generate a synthetic stack with known truth")
    s.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--truth", help="where to write the truth transforms")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"swiftreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"swiftreg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
