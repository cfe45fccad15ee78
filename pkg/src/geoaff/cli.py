"""Command-line surface: render, validate, refine, metrics, bench, align,
sample, viz.

Exit codes: 0 success, 1 semantic violation (e.g. a pose that penetrates the
scene), 2 input/parse error, 3 internal invariant failure. Every invocation
writes a manifest (<primary output>.manifest.json) recording inputs, outputs,
their content hashes, the effective configuration and the seed, so runs are
auditable and byte-for-byte reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .affordance import geometry_loss, valid_joints, free_intervals, _joint_penetration
from .bench import BenchConfig, format_table, run_bench
from .errors import (ConvergenceError, DegenerateInputError, GeoaffError,
                     InvariantError, ParseError)
from .mldepth import load_mld, render_mld, save_mld, visualize_layers
from .pipeline import (adaptive_sample, load_sequence, ransac_time_align,
                       time_model_inliers)
from .pose import load_pose, metrics_report, pose_from_json_dict, save_pose
from .refine import RefineConfig, refine_pose, report_to_json_dict
from .scene import load_camera, load_mesh


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(command: str, inputs, outputs, config: dict,
                    seed=None, manifest_path=None) -> None:
    if manifest_path is None:
        manifest_path = str(outputs[0]) + ".manifest.json"
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in outputs],
    }
    _write_json(manifest_path, payload)


def _load_pose_list(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(data, list):
        return [pose_from_json_dict(d) for d in data]
    return [pose_from_json_dict(data)]


# ---------------------------------------------------------------------------
# Commands

def cmd_render(args) -> int:
    mesh = load_mesh(args.mesh)
    camera = load_camera(args.camera)
    mld = render_mld(mesh, camera, layers=args.layers, threads=args.threads)
    mld.validate()
    save_mld(mld, args.out)
    _write_manifest("render", [args.mesh, args.camera], [args.out],
                    {"layers": args.layers}, manifest_path=args.manifest)
    return 0


def cmd_validate(args) -> int:
    pose = load_pose(args.pose)
    mld = load_mld(args.map)
    ok = valid_joints(pose, mld)
    rows = []
    for j, (x, y, z) in enumerate(pose.joints):
        layers = mld.layers_at(x, y)
        rows.append({
            "index": j,
            "name": pose.joint_names[j],
            "valid": bool(ok[j]),
            "penetration_mm": _joint_penetration(layers, float(z)),
        })
    report = {
        "valid": bool(ok.all()),
        "gcl_mm": geometry_loss(pose, mld),
        "joints": rows,
    }
    if args.report:
        _write_json(args.report, report)
        _write_manifest("validate", [args.pose, args.map], [args.report],
                        {}, manifest_path=args.manifest)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0 if report["valid"] else 1


def _refine_config_from(path) -> RefineConfig:
    if path is None:
        return RefineConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    allowed = {"lambda_data", "lambda_geom", "lambda_bone", "step",
               "max_iters", "tol"}
    unknown = set(d) - allowed
    if unknown:
        raise ParseError(f"{path}: unknown refine options {sorted(unknown)}")
    return RefineConfig(**d)


def cmd_refine(args) -> int:
    pose = load_pose(args.pose)
    mld = load_mld(args.map)
    cfg = _refine_config_from(args.config)
    report = refine_pose(pose, mld, cfg=cfg)
    save_pose(report.pose, args.out)
    outputs = [args.out]
    if args.report:
        _write_json(args.report, report_to_json_dict(report))
        outputs.append(args.report)
    inputs = [args.pose, args.map] + ([args.config] if args.config else [])
    _write_manifest("refine", inputs, outputs,
                    {"config": args.config}, seed=args.seed,
                    manifest_path=args.manifest)
    return 0


def cmd_metrics(args) -> int:
    preds = _load_pose_list(args.pred)
    gts = _load_pose_list(args.gt)
    if len(preds) != len(gts):
        raise ParseError(f"pose count mismatch: {len(preds)} predictions "
                         f"vs {len(gts)} ground truths")
    report = metrics_report(zip(preds, gts), threshold=args.threshold)
    if args.out:
        _write_json(args.out, report)
        _write_manifest("metrics", [args.pred, args.gt], [args.out],
                        {"threshold": args.threshold},
                        manifest_path=args.manifest)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_bench(args) -> int:
    cfg = BenchConfig(scenes=args.scenes, poses=args.poses,
                      noise_mm=args.noise, seed=args.seed,
                      threads=args.threads)
    result = run_bench(cfg)
    print(format_table(result))
    if args.out:
        _write_json(args.out, result)
        _write_manifest("bench", [], [args.out],
                        {"scenes": args.scenes, "poses": args.poses,
                         "noise": args.noise}, seed=args.seed,
                        manifest_path=args.manifest)
    return 0


def cmd_align(args) -> int:
    try:
        with open(args.pairs, "r", encoding="utf-8") as fh:
            pairs = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.pairs}: invalid JSON: {exc}") from exc
    model = ransac_time_align(pairs, threshold=args.threshold,
                              iters=args.iters, seed=args.seed)
    inliers = time_model_inliers(model, pairs)
    payload = {
        "scale": model.scale,
        "offset": model.offset,
        "inlier_count": model.inlier_count,
        "inlier_threshold": model.inlier_threshold,
        "inliers": [int(i) for i in np.nonzero(inliers)[0]],
    }
    if args.out:
        _write_json(args.out, payload)
        _write_manifest("align", [args.pairs], [args.out],
                        {"threshold": args.threshold, "iters": args.iters},
                        seed=args.seed, manifest_path=args.manifest)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_sample(args) -> int:
    seq = load_sequence(args.sequence)
    kept, threshold = adaptive_sample(seq, threshold_percentile=args.percentile)
    payload = {
        "kept_indices": kept,
        "threshold": threshold,
        "kept_fraction": len(kept) / len(seq),
        "total_frames": len(seq),
    }
    if args.out:
        _write_json(args.out, payload)
        _write_manifest("sample", [args.sequence], [args.out],
                        {"percentile": args.percentile},
                        manifest_path=args.manifest)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def cmd_viz(args) -> int:
    from PIL import Image
    mld = load_mld(args.map)
    n = args.layers if args.layers is not None else min(3, mld.layers)
    images = visualize_layers(mld, n)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    for i, img in enumerate(images):
        path = os.path.join(args.out_dir, f"layer_{i:02d}.png")
        Image.fromarray(img, mode="L").save(path)
        outputs.append(path)
    _write_manifest("viz", [args.map], outputs, {"layers": n},
                    manifest_path=args.manifest)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geoaff",
        description="Scene-affordance geometry toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_manifest(sp):
        sp.add_argument("--manifest", default=None,
                        help="manifest path (default: <out>.manifest.json)")

    sp = sub.add_parser("render", help="render a mesh into a multi-layer depth map")
    sp.add_argument("mesh")
    sp.add_argument("camera")
    sp.add_argument("--layers", type=int, default=15)
    sp.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: GEOAFF_THREADS or 1)")
    sp.add_argument("--out", required=True)
    add_manifest(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("validate", help="check a pose against scene free space")
    sp.add_argument("pose")
    sp.add_argument("map")
    sp.add_argument("--report", default=None)
    add_manifest(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("refine", help="push a pose out of occupied geometry")
    sp.add_argument("pose")
    sp.add_argument("map")
    sp.add_argument("--config", default=None, help="refine options JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None)
    sp.add_argument("--seed", type=int, default=0)
    add_manifest(sp)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("metrics", help="MPJPE / PCK3D between metric poses")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("--threshold", type=float, default=150.0)
    sp.add_argument("--out", default=None)
    add_manifest(sp)
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("bench", help="synthetic refinement benchmark")
    sp.add_argument("--scenes", type=int, default=20)
    sp.add_argument("--poses", type=int, default=10)
    sp.add_argument("--noise", type=float, default=80.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--out", default=None)
    add_manifest(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("align", help="robust timestamp alignment")
    sp.add_argument("pairs", help="JSON list of [local_t, global_t] pairs")
    sp.add_argument("--threshold", type=float, default=1.0 / 60.0)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    add_manifest(sp)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("sample", help="adaptive non-redundant frame selection")
    sp.add_argument("sequence", help="JSON-lines skeleton sequence")
    sp.add_argument("--percentile", type=float, default=55.0)
    sp.add_argument("--out", default=None)
    add_manifest(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("viz", help="write per-layer disparity PNGs")
    sp.add_argument("map")
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--out-dir", required=True)
    add_manifest(sp)
    sp.set_defaults(func=cmd_viz)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvariantError, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3
    except (ParseError, DegenerateInputError, ConvergenceError, GeoaffError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
