"""Command line: ``ncfreg {register,warp,synth,eval}``.

Machine-readable results are printed as one JSON line on stdout; progress and
diagnostics go to stderr. Exit codes: 0 success, 2 usage or validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .engine import NonFiniteLossError, RunConfig, export_field, import_field, register_pair, warp_image, write_loss_log
from .metrics import dice, endpoint_error, gen_synthetic_case, jacobian_folding, read_landmarks, tre, write_synthetic_case
from .volume import MetaImageError, load_volume, save_volume

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

logger = logging.getLogger("ncfreg")


class UsageError(Exception):
    pass


def _emit(obj):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("NCF_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"NCF_THREADS must be an integer, got {env!r}") from None
    return None


def run_register(args):
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    if _threads(args) == 1 and not config.deterministic:
        config = dataclasses.replace(config, deterministic=True)
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    if fixed.shape != moving.shape:
        raise UsageError(f"fixed {fixed.shape} and moving {moving.shape} shapes differ")
    result = register_pair(fixed, moving, config)
    out_field = Path(args.out_field)
    out_field.parent.mkdir(parents=True, exist_ok=True)
    export_field(result.offset, out_field)
    save_volume(result.warped, args.out_warped)
    log_path = out_field.with_name(out_field.stem + "_loss.csv")
    write_loss_log(result.loss_history, log_path)
    _emit({
        "initial": result.loss_history[0],
        "final": result.loss_history[-1],
        "final_lr": result.final_lr,
        "iterations": config.iterations,
        "mean_offset_voxels": result.mean_offset(),
        "n_params": result.n_params,
        "wall_time": result.wall_time,
        "loss_log": str(log_path),
    })
    return EXIT_OK


def run_warp(args):
    field = import_field(args.field)
    image = load_volume(args.input)
    if field.shape != image.shape:
        raise UsageError(f"field shape {field.shape} does not match image shape {image.shape}")
    out = warp_image(image, field, args.interp)
    save_volume(out, args.out)
    _emit({"out": str(args.out), "interp": args.interp, "shape": list(out.shape)})
    return EXIT_OK


def _size(values):
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise UsageError("--size takes one or three integers")


def run_synth(args):
    try:
        case = gen_synthetic_case(_size(args.size), args.seed, args.max_disp)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = write_synthetic_case(case, args.out_dir)
    _emit({
        "out_dir": str(args.out_dir),
        "gt_folding": case.gt_folding,
        "pre_dice": case.pre_dice,
        "checksums": manifest["checksums"],
    })
    return EXIT_OK


def run_eval(args):
    fixed_mask = load_volume(args.fixed_mask)
    warped_mask = load_volume(args.warped_mask)
    if fixed_mask.shape != warped_mask.shape:
        raise UsageError(f"mask shapes differ: {fixed_mask.shape} vs {warped_mask.shape}")
    report = {"dice": dice(fixed_mask, warped_mask)}
    pred = import_field(args.pred_field) if args.pred_field else None
    if pred is not None:
        if pred.shape != fixed_mask.shape:
            raise UsageError(f"predicted field shape {pred.shape} does not match masks {fixed_mask.shape}")
        pred = pred.to_voxel()
        report["folding"] = jacobian_folding(pred)
    if args.gt_field:
        if pred is None:
            raise UsageError("--gt-field needs --pred-field")
        gt = import_field(args.gt_field).to_voxel()
        mean, worst = endpoint_error(pred, gt)
        report["endpoint"] = {"mean": mean, "max": worst}
    if args.landmarks:
        if pred is None:
            raise UsageError("--landmarks needs --pred-field")
        report["tre"] = tre(read_landmarks(args.landmarks), pred, fixed_mask.spacing)
    _emit(report)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: all cores; 1 forces deterministic mode). "
                             "Falls back to $NCF_THREADS.")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ncfreg", description="Per-pair neural deformable registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", parents=[common], help="fit a field to a fixed/moving pair")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--config", help="JSON file with run settings")
    p.set_defaults(func=run_register)

    p = sub.add_parser("warp", parents=[common], help="apply a displacement field to an image")
    p.add_argument("--field", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interp", choices=("linear", "nearest"), default="linear")
    p.set_defaults(func=run_warp)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic case with known ground truth")
    p.add_argument("--size", type=int, nargs="+", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-disp", type=float, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("eval", parents=[common], help="compute registration metrics")
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--warped-mask", required=True)
    p.add_argument("--pred-field")
    p.add_argument("--gt-field")
    p.add_argument("--landmarks")
    p.set_defaults(func=run_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _threads(args)
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except NonFiniteLossError as exc:
        print(f"ncfreg: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, MetaImageError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"ncfreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
