"""Command-line front door: synth-scene | train | render | verify | eval.

Exit codes: 0 on success, 1 on any input problem (bad flags, unparsable
or missing files, invalid config), 2 on runtime failures. Every command
is deterministic given its flags and seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from .cameras import zoom_in_camera
from .io import (
    ParseError,
    read_camera_json,
    read_cameras,
    read_dataset,
    read_image,
    read_ply,
    write_cameras,
    write_image,
    write_ply,
)
from .metrics import evaluate_pairs
from .rasterize import FilterSpec, render
from .scene import InvalidInputError, dequantize_array, quantize_array
from .synth import orbit_cameras, random_scene
from .training import config_from_dict, save_checkpoint, train
from .verify import SUITE_NAMES, run_suites

ENDPOINT_ENV = "SPLATFORGE_DIFFUSION_ENDPOINT"


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatforge",
                     description="Desk-scale Gaussian splatting toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth-scene",
                       help="write a random scene PLY plus orbit cameras")
    p.add_argument("--gaussians", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bounds", type=float, default=0.8)
    p.add_argument("--out", required=True, help="scene PLY path")
    p.add_argument("--cameras", type=int, required=True)
    p.add_argument("--cam-out", required=True, help="camera JSON directory")
    p.set_defaults(func=_cmd_synth_scene)

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("--config", required=True, help="YAML config path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None,
                   help="checkpoint prefix to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a scene from one camera")
    p.add_argument("--scene", required=True, help="scene PLY path")
    p.add_argument("--camera", required=True, help="camera JSON path")
    p.add_argument("--zoom", type=float, default=1.0)
    p.add_argument("--filter", default=None,
                   help='filter parameters as JSON, e.g. '
                        '\'{"min_footprint_px": 1.0}\'')
    p.add_argument("--out", required=True, help="output PNG/PPM path")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("verify", help="run the property verification suites")
    p.add_argument("--suite", required=True,
                   choices=SUITE_NAMES + ("all",))
    p.add_argument("--report", default=None, help="write rows as JSON here")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("eval", help="PSNR/SSIM of a scene against ground truth")
    p.add_argument("--scene", required=True, help="scene PLY path")
    p.add_argument("--cameras", required=True, help="camera JSON directory")
    p.add_argument("--gt", required=True,
                   help="ground-truth directory (view images, or a scene "
                        "PLY for zoomed comparisons)")
    p.add_argument("--zoom", type=float, default=1.0)
    p.set_defaults(func=_cmd_eval)

    return parser


def _cmd_synth_scene(args) -> int:
    if args.gaussians < 1:
        raise InvalidInputError("--gaussians must be >= 1")
    if args.cameras < 1:
        raise InvalidInputError("--cameras must be >= 1")
    scene = random_scene(args.gaussians, seed=args.seed, bounds=args.bounds)
    write_ply(scene, args.out)
    paths = write_cameras(
        orbit_cameras(args.cameras, seed=args.seed), args.cam_out)
    print(f"wrote {args.out} ({args.gaussians} Gaussians) and "
          f"{len(paths)} cameras to {args.cam_out}")
    return 0


def _cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML in {args.config}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInputError(
            f"{args.config} must hold a mapping at top level")
    dataset_dir = data.pop("dataset", None)
    if not dataset_dir:
        raise InvalidInputError(
            f"{args.config} must name a dataset directory under 'dataset'")
    config = config_from_dict(data)
    endpoint = os.environ.get(ENDPOINT_ENV)
    if endpoint:
        config = replace(config, pseudo=replace(
            config.pseudo, backend="remote", endpoint=endpoint))
    dataset = read_dataset(dataset_dir)
    result = train(config, dataset, out_dir=args.out,
                   resume_from=args.resume)
    final = os.path.join(args.out,
                         f"ckpt_{result.state.iteration:06d}")
    save_checkpoint(result.state, final)
    last = result.log[-1]
    print(f"trained {result.state.iteration} iterations, "
          f"{len(result.scene)} Gaussians, "
          f"PSNR {last['psnr']:.2f} dB, SSIM {last['ssim']:.4f}")
    print(f"final checkpoint: {final}.ply")
    return 0


def _parse_filter(text) -> FilterSpec:
    if text is None:
        return FilterSpec()
    try:
        fields = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid filter JSON (offset {exc.pos}): {exc.msg}") from exc
    if not isinstance(fields, dict):
        raise InvalidInputError("--filter must be a JSON object")
    try:
        return FilterSpec(**fields)
    except TypeError as exc:
        raise InvalidInputError(f"bad filter parameters: {exc}") from exc


def _cmd_render(args) -> int:
    scene = read_ply(args.scene)
    cam = read_camera_json(args.camera)
    if args.zoom != 1.0:
        cam = zoom_in_camera(cam, args.zoom)
    out = render(scene, cam, _parse_filter(args.filter))
    write_image(out.image, args.out)
    print(f"wrote {args.out} ({cam.width}x{cam.height})")
    return 0


def _cmd_verify(args) -> int:
    checks = run_suites(args.suite)
    rows = [c.to_json_dict() for c in checks]
    for row in rows:
        status = "PASS" if row["pass"] else "FAIL"
        print(f"{status}  {row['check']}: value {row['value']:.6g} "
              f"vs bound {row['bound']:.6g}  {json.dumps(row['params'])}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        print(f"report written to {args.report}")
    return 0 if all(row["pass"] for row in rows) else 1


def _find_gt_scene(gt_path) -> str:
    if os.path.isfile(gt_path) and gt_path.endswith(".ply"):
        return gt_path
    if os.path.isdir(gt_path):
        plys = sorted(p for p in os.listdir(gt_path) if p.endswith(".ply"))
        if len(plys) == 1:
            return os.path.join(gt_path, plys[0])
        if len(plys) > 1:
            raise InvalidInputError(
                f"{gt_path} holds {len(plys)} scene PLYs; keep exactly one")
    raise InvalidInputError(
        f"zoomed evaluation needs a ground-truth scene PLY in {gt_path}")


def _cmd_eval(args) -> int:
    scene = read_ply(args.scene)
    cams = read_cameras(args.cameras)
    f = FilterSpec()
    pairs = []
    if args.zoom != 1.0:
        gt_scene = read_ply(_find_gt_scene(args.gt))
        for cam in cams:
            zc = zoom_in_camera(cam, args.zoom)
            cand = dequantize_array(quantize_array(render(scene, zc, f).image))
            ref = dequantize_array(quantize_array(render(gt_scene, zc, f).image))
            pairs.append((cand, ref))
    else:
        gt_dir = args.gt
        views = sorted(p for p in os.listdir(gt_dir)
                       if p.startswith("view_") and p.endswith((".png", ".ppm")))
        if len(views) != len(cams):
            raise InvalidInputError(
                f"{len(cams)} cameras but {len(views)} ground-truth images "
                f"in {gt_dir}")
        for cam, view in zip(cams, views):
            cand = dequantize_array(quantize_array(render(scene, cam, f).image))
            ref = dequantize_array(
                read_image(os.path.join(gt_dir, view)).pixels)
            pairs.append((cand, ref))

    report = evaluate_pairs(pairs)
    print(f"{'view':>6}  {'psnr':>8}  {'ssim':>8}")
    for i, (p, s) in enumerate(zip(report.psnr_values, report.ssim_values)):
        print(f"{i:>6}  {p:8.3f}  {s:8.4f}")
    print(f"{'mean':>6}  {report.mean_psnr:8.3f}  {report.mean_ssim:8.4f}")
    doc = {"zoom": args.zoom,
           "psnr": list(report.psnr_values),
           "ssim": list(report.ssim_values),
           "mean_psnr": report.mean_psnr,
           "mean_ssim": report.mean_ssim}
    with open("eval.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    print("metrics written to eval.json")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
