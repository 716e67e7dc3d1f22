"""Command-line interface: register pairs, evaluate masks, generate
synthetic data.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import image_io, metrics, synth
from .engine import RegistrationConfig, register
from .warp import displacement_pixels, warp_mask_nearest


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="diffreg",
        description="Training-free diffeomorphic deformable image registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_reg = sub.add_parser("register", help="register a moving/fixed image pair")
    p_reg.add_argument("--moving", required=True, help="moving image (PGM/PNG)")
    p_reg.add_argument("--fixed", required=True, help="fixed image (PGM/PNG)")
    p_reg.add_argument("--out", required=True, help="output directory")
    p_reg.add_argument("--levels", type=int, default=2)
    p_reg.add_argument("--iters", type=int, default=800)
    p_reg.add_argument("--lr", type=float, default=5e-4)
    p_reg.add_argument("--lambda", dest="lambda_weight", type=float, default=5.0)
    p_reg.add_argument("--loss", choices=("mse", "ssim", "ssim+mi"), default="ssim+mi")
    p_reg.add_argument("--sigma", type=float, default=1.0)
    p_reg.add_argument("--unidirectional", action="store_true")
    p_reg.add_argument("--seed", type=int, default=0)
    p_reg.add_argument("--config", help="manifest.json to reproduce a previous run")

    p_eval = sub.add_parser("evaluate", help="score a displacement field against masks")
    p_eval.add_argument("--disp", required=True, help="forward displacement (.dfld)")
    p_eval.add_argument("--moving-mask", required=True)
    p_eval.add_argument("--fixed-mask", required=True)
    p_eval.add_argument("--out", required=True, help="report JSON path")
    p_eval.add_argument("--label", type=int, default=None)

    p_synth = sub.add_parser("synth", help="generate synthetic ground-truth pairs")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--amplitude-px", type=float, default=6.0)
    p_synth.add_argument("--sigma-px", type=float, default=8.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--count", type=int, default=1)
    return parser


def _config_from_args(args):
    if args.config:
        with open(args.config) as f:
            manifest = json.load(f)
        return RegistrationConfig(**manifest["config"])
    return RegistrationConfig(
        levels=args.levels, iterations=args.iters, lr=args.lr,
        lambda_weight=args.lambda_weight, loss_mode=args.loss, sigma=args.sigma,
        bidirectional=not args.unidirectional, seed=args.seed)


def cmd_register(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _config_from_args(args)
    moving = image_io.load_image(args.moving)
    fixed = image_io.load_image(args.fixed)
    result = register(moving, fixed, cfg)

    outputs = {}

    def emit(name, writer, *data):
        writer(*data, out_dir / name)
        # paths relative to the manifest keep run directories relocatable
        # and seeded manifests byte-identical
        outputs[name.split(".")[0]] = name

    emit("warped_fwd.pgm", image_io.save_image, result.warped_moving)
    emit("disp_fwd.dfld", image_io.save_displacement, result.forward_field)
    emit("flow_fwd.png", image_io.save_flow_png, result.forward_field)
    if result.backward_field is not None:
        emit("warped_bwd.pgm", image_io.save_image, result.warped_fixed)
        emit("disp_bwd.dfld", image_io.save_displacement, result.backward_field)
        emit("flow_bwd.png", image_io.save_flow_png, result.backward_field)

    disp = displacement_pixels(result.forward_field)
    mean_disp = float(np.hypot(disp[0], disp[1]).mean())
    manifest = {
        "config": cfg.to_dict(),
        "inputs": {"moving": str(args.moving), "fixed": str(args.fixed)},
        "outputs": outputs,
        "metrics": {
            "final_loss": result.loss_trace[-1],
            "mean_displacement_px": mean_disp,
            "nonpositive_jacobian": metrics.count_nonpositive_jacobian(result.forward_field),
        },
        "loss_trace": result.loss_trace,
        "wall_seconds": result.elapsed_seconds,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return 0


def cmd_evaluate(args):
    field = image_io.load_displacement(args.disp)
    moving_mask = image_io.load_mask(args.moving_mask)
    fixed_mask = image_io.load_mask(args.fixed_mask)
    if moving_mask.shape != fixed_mask.shape or field.shape[1:] != fixed_mask.shape:
        raise ValueError("evaluate: field and mask extents differ")
    warped = warp_mask_nearest(moving_mask, field)
    labels = [args.label] if args.label is not None else None
    report = metrics.evaluate_masks(warped, fixed_mask, field=field[None], labels=labels)
    doc = report.to_dict()
    if args.label is not None:
        key = str(args.label)
        doc["dice"] = doc["dice"][key]
        doc["hausdorff_px"] = doc["hausdorff_px"][key]
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2)
    return 0


def cmd_synth(args):
    if args.amplitude_px > 0.25 * args.size:
        raise UsageError(
            f"--amplitude-px {args.amplitude_px} exceeds 0.25 * size ({0.25 * args.size})")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(args.count):
        seed = args.seed + i
        pair = synth.generate_pair(seed, size=args.size,
                                   amplitude_px=args.amplitude_px, sigma_px=args.sigma_px)
        stem = f"pair{i:03d}"
        files = {
            "fixed": f"{stem}_fixed.pgm",
            "moving": f"{stem}_moving.pgm",
            "fixed_mask": f"{stem}_fixed_mask.pgm",
            "moving_mask": f"{stem}_moving_mask.pgm",
            "gt_field": f"{stem}_gt.dfld",
        }
        image_io.save_image(pair.fixed, out_dir / files["fixed"])
        image_io.save_image(pair.moving, out_dir / files["moving"])
        image_io.save_mask(pair.fixed_mask, out_dir / files["fixed_mask"])
        image_io.save_mask(pair.moving_mask, out_dir / files["moving_mask"])
        image_io.save_displacement(pair.gt_field, out_dir / files["gt_field"])
        pairs.append({"seed": seed, "files": files})
    manifest = {
        "generator": {
            "size": args.size, "amplitude_px": args.amplitude_px,
            "sigma_px": args.sigma_px, "seed": args.seed, "count": args.count,
        },
        "pairs": pairs,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return 0


class UsageError(ValueError):
    pass


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    handlers = {"register": cmd_register, "evaluate": cmd_evaluate, "synth": cmd_synth}
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
