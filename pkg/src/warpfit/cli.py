"""Command-line interface.

One subcommand per pipeline stage plus single-pair utilities:

    warpfit gen-data       --config cfg.txt
    warpfit train-locnet   --config cfg.txt
    warpfit train-matcher  --config cfg.txt        (both matcher variants)
    warpfit eval           --config cfg.txt [--deterministic]
    warpfit pipeline       --config cfg.txt [--deterministic]
    warpfit register       --moving m.png --moving-mask mm.png --fixed f.png
    warpfit warp           --mask in.png --params p.txt --out-png out.png

Exit code 0 on success, 1 on failure with a stage-tagged message on
stderr.
"""

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import FormatError, PipelineError, WarpfitError
from .imaging import overlay_masks, read_png_gray, write_png_gray, write_png_rgb
from .locnet import load_locnet
from .matcher import load_matcher
from .pipeline import (ExperimentPaths, register_pair, run_experiment,
                       stage_eval, stage_gen_data, stage_train_locnet,
                       stage_train_matcher, stage_train_matcher_noloc)
from .tps import ControlGrid, TpsParams, warp_mask


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpfit",
        description="Localize, crop, and match objects with thin-plate-spline warps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded evaluation for bit-exact reruns")

    for name, blurb in (
            ("gen-data", "generate every dataset split"),
            ("train-locnet", "train the localizer"),
            ("train-matcher", "train the matcher and its no-localization variant"),
            ("eval", "score the trained models and write the report"),
            ("pipeline", "run every stage in order")):
        add_common(sub.add_parser(name, help=blurb))

    reg = sub.add_parser("register", help="register one moving/fixed pair")
    add_common(reg)
    reg.add_argument("--moving", required=True, help="moving grayscale PNG")
    reg.add_argument("--moving-mask", required=True, help="moving object mask PNG")
    reg.add_argument("--fixed", required=True, help="fixed grayscale PNG")
    reg.add_argument("--locnet", help="localizer checkpoint "
                     "(default: <out>/checkpoints/locnet.wfck)")
    reg.add_argument("--matcher", help="matcher checkpoint "
                     "(default: <out>/checkpoints/matcher.wfck)")
    reg.add_argument("--skip-localization", action="store_true",
                     help="match against the whole fixed frame")

    wrp = sub.add_parser("warp", help="apply saved warp parameters to a mask")
    wrp.add_argument("--mask", required=True, help="input mask PNG")
    wrp.add_argument("--params", required=True,
                     help="text file, one float per line: 6 affine values "
                          "then 2K displacements")
    wrp.add_argument("--out-png", required=True, help="output PNG path")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _paths(cfg: ExperimentConfig) -> ExperimentPaths:
    paths = ExperimentPaths(Path(cfg.out_dir))
    paths.metrics.mkdir(parents=True, exist_ok=True)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    return paths


def _cmd_stage(args) -> None:
    cfg = _load_cfg(args)
    if args.command == "pipeline":
        summary = run_experiment(cfg, deterministic=args.deterministic)
        _print_eval(summary["eval"])
        return
    paths = _paths(cfg)
    try:
        if args.command == "gen-data":
            stage_gen_data(cfg, paths)
        elif args.command == "train-locnet":
            out = stage_train_locnet(cfg, paths)
            print(f"best epoch {out['best']['epoch']}: "
                  f"val box IoU {out['best']['iou']:.4f}")
        elif args.command == "train-matcher":
            out = stage_train_matcher(cfg, paths)
            print(f"matcher best epoch {out['best']['epoch']}: "
                  f"val DC {out['best']['dice']:.4f}")
            out2 = stage_train_matcher_noloc(cfg, paths)
            print(f"no-localization matcher best epoch {out2['best']['epoch']}: "
                  f"val DC {out2['best']['dice']:.4f}")
        elif args.command == "eval":
            _print_eval(stage_eval(cfg, paths, args.deterministic))
    except PipelineError:
        raise
    except WarpfitError as exc:
        raise PipelineError(args.command, exc) from exc


def _print_eval(summary: dict) -> None:
    print(f"detection  DC {summary['detection_dc']:.4f}  "
          f"mIoU {summary['detection_miou']:.4f}  "
          f"rate {summary['detection_rate']:.3f}")
    print(f"matching   DC {summary['matching_dc']:.4f}  "
          f"mIoU {summary['matching_miou']:.4f}")
    print(f"pipeline   DC {summary['pipeline_dc']:.4f}  vs no-localization "
          f"DC {summary['noloc_dc']:.4f}  (gap {summary['ablation_gap']:.4f})")


def _cmd_register(args) -> None:
    cfg = _load_cfg(args)
    paths = ExperimentPaths(Path(cfg.out_dir))
    matcher = load_matcher(args.matcher or paths.matcher_ckpt)
    loc_model = None
    if not args.skip_localization:
        loc_model = load_locnet(args.locnet or paths.locnet_ckpt)
    moving = read_png_gray(args.moving)
    moving_mask = read_png_gray(args.moving_mask)
    fixed = read_png_gray(args.fixed)
    record = register_pair(loc_model, matcher, moving, moving_mask, fixed,
                           crop_margin=cfg.crop_margin,
                           smoothness_weight=cfg.smoothness_weight,
                           skip_localization=args.skip_localization)

    out_dir = Path(cfg.out_dir) / "register"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png_rgb(out_dir / "overlay.png",
                  overlay_masks(record.fixed_crop, record.result.warped))
    write_png_gray(out_dir / "warped.png", record.result.warped)
    with open(out_dir / "record.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["moving", "fixed", "dc", "miou", "dice_loss",
                         "smoothness", "fallback"])
        writer.writerow([args.moving, args.fixed,
                         f"{record.result.dc:.6f}", f"{record.result.miou:.6f}",
                         f"{record.result.losses.dice:.6f}",
                         f"{record.result.losses.smoothness:.6f}",
                         int(record.fallback)])
    print(f"DC {record.result.dc:.4f}  mIoU {record.result.miou:.4f}  "
          f"-> {out_dir / 'overlay.png'}")


def _cmd_warp(args) -> None:
    mask = read_png_gray(args.mask)
    values = []
    with open(args.params, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise FormatError(
                    f"{args.params}:{ln}: not a float: '{line}'") from None
    if len(values) < 8 or (len(values) - 6) % 2 != 0:
        raise FormatError(
            f"{args.params}: need 6 affine values plus 2K displacements, "
            f"got {len(values)} lines")
    k = (len(values) - 6) // 2
    side = math.isqrt(k)
    if side * side != k:
        raise FormatError(
            f"{args.params}: {k} control points is not a square grid")
    params = TpsParams.from_vector(np.asarray(values))
    warped = warp_mask(mask, params, ControlGrid(side))
    write_png_gray(args.out_png, warped)
    print(f"warped {args.mask} with {k} control points -> {args.out_png}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "register":
            _cmd_register(args)
        elif args.command == "warp":
            _cmd_warp(args)
        else:
            _cmd_stage(args)
    except PipelineError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except WarpfitError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
