"""Command-line entry points: synth, train, infer, vectorize, eval, ipm, svg."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .geometry import BevConfig, fuse_cameras, ipm_warp_grid
from .io import (
    FormatError,
    load_rig,
    read_grid,
    read_vector_map,
    render_map_svg,
    write_grid,
    write_vector_map,
)
from .vectorize import VectorizeParams, vectorize


def _parse_bev(text: str) -> BevConfig:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 5:
        raise ValueError("--bev expects x_min,x_max,y_min,y_max,pitch")
    return BevConfig(*parts)


def _add_bev_arg(parser, default: str):
    parser.add_argument("--bev", type=_parse_bev, default=_parse_bev(default),
                        metavar="XMIN,XMAX,YMIN,YMAX,PITCH",
                        help=f"BEV extent and pitch (default {default})")


def _cmd_synth(args) -> int:
    from .synth import SceneSpec, generate_dataset

    spec = SceneSpec(
        seed=args.seed,
        lane_count=args.lane_count,
        lane_width=args.lane_width,
        curvature_max=args.curvature_max,
        crossing_prob=args.crossing_prob,
        point_density=args.point_density,
        image_height=args.image_height,
        image_width=args.image_width,
    )
    rig = load_rig(args.rig) if args.rig else None
    generate_dataset(args.out, args.n, spec, args.bev, rig=rig,
                     n_dirs=args.n_dirs, step_px=args.step_px)
    print(f"wrote {args.n} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .bevnet import LossWeights, TrainConfig, save_params, train_toy

    cfg = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed,
                      weights=LossWeights(), embed_dim=args.embed_dim)
    model, trace = train_toy(args.data, cfg)
    out = Path(args.out)
    save_params(out, model, extra={"steps": cfg.steps, "lr": cfg.lr,
                                   "seed": cfg.seed, "data": str(args.data)})
    (out / "trace.json").write_text(json.dumps(trace, indent=2) + "\n")
    first, last = trace[0]["total"], trace[-1]["total"]
    print(f"trained {cfg.steps} steps: loss {first:.4f} -> {last:.4f}")
    return 0


def _cmd_infer(args) -> int:
    from .bevnet import infer_scene, load_params
    from .synth import load_dataset

    model = load_params(args.params)
    manifest, scenes = load_dataset(args.data)
    out = Path(args.out)
    n = len(scenes) if args.limit is None else min(args.limit, len(scenes))
    for i in range(n):
        seg, emb, dirs = infer_scene(model, scenes[i], manifest["rig"], manifest["bev"])
        scene_out = out / f"scene_{i:05d}"
        scene_out.mkdir(parents=True, exist_ok=True)
        write_grid(scene_out / "seg.bvg", seg)
        write_grid(scene_out / "emb.bvg", emb)
        write_grid(scene_out / "dir.bvg", dirs)
    print(f"wrote head grids for {n} scenes to {out}")
    return 0


def _cmd_vectorize(args) -> int:
    pred = Path(args.pred)
    seg = read_grid(pred / "seg.bvg")
    emb = read_grid(pred / "emb.bvg")
    dirs = read_grid(pred / "dir.bvg")
    params = VectorizeParams(fg_threshold=args.fg_threshold, eps=args.eps,
                             min_pts=args.min_pts, step=args.step,
                             dist_threshold=args.dist_threshold)
    vm = vectorize(seg, emb, dirs, args.bev, params)
    write_vector_map(args.out, vm)
    if args.svg:
        Path(args.svg).write_text(render_map_svg(vm))
    print(f"vectorized {len(vm.elements)} elements to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import class_masks, evaluate

    pred = read_vector_map(args.pred)
    gt = read_vector_map(args.gt)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    report = evaluate(pred, gt,
                      class_masks(pred, gt.bev), class_masks(gt, gt.bev),
                      thresholds=thresholds)
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
    sys.stdout.write(report.to_text())
    return 0


def _cmd_ipm(args) -> int:
    rig = load_rig(args.rig)
    images = Path(args.images)
    views = []
    for cam in rig:
        persp = read_grid(images / f"cam_{cam.name}.bvg")
        views.append(ipm_warp_grid(cam, persp, args.bev))
    fused = fuse_cameras(views)
    write_grid(args.out, fused)
    print(f"fused {len(views)} cameras into {args.out}")
    return 0


def _cmd_svg(args) -> int:
    vm = read_vector_map(args.map)
    Path(args.out).write_text(render_map_svg(vm, scale=args.scale))
    print(f"rendered {len(vm.elements)} elements to {args.out}")
    return 0


DEFAULT_BEV = "-30.0,30.0,-15.0,15.0,0.15"
TRAIN_BEV = "-15.0,15.0,-10.0,10.0,0.5"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevmap",
        description="Vectorized HD-map learning toolkit: synthetic data, "
                    "toy training, vectorization and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_bev_arg(p, TRAIN_BEV)
    p.add_argument("--rig", help="rig JSON (default: built-in front/back pair)")
    p.add_argument("--lane-count", type=int, default=2)
    p.add_argument("--lane-width", type=float, default=3.5)
    p.add_argument("--curvature-max", type=float, default=0.02)
    p.add_argument("--crossing-prob", type=float, default=0.3)
    p.add_argument("--point-density", type=float, default=3.0)
    p.add_argument("--image-height", type=int, default=24)
    p.add_argument("--image-width", type=int, default=32)
    p.add_argument("--n-dirs", type=int, default=36)
    p.add_argument("--step-px", type=float, default=4.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the toy model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--embed-dim", type=int, default=16)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run the trained heads over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("vectorize", help="turn head grids into a vector map")
    p.add_argument("--pred", required=True,
                   help="directory holding seg.bvg, emb.bvg, dir.bvg")
    _add_bev_arg(p, TRAIN_BEV)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", help="also render the map to this SVG file")
    p.add_argument("--fg-threshold", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--min-pts", type=int, default=3)
    p.add_argument("--step", type=float, default=4.0)
    p.add_argument("--dist-threshold", type=float, default=8.0)
    p.set_defaults(func=_cmd_vectorize)

    p = sub.add_parser("eval", help="score a predicted map against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds", default="0.2,0.5,1.0")
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ipm", help="fuse camera grids into the BEV by ground-plane warp")
    p.add_argument("--rig", required=True)
    p.add_argument("--images", required=True,
                   help="directory holding cam_<name>.bvg for every rig camera")
    _add_bev_arg(p, DEFAULT_BEV)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ipm)

    p = sub.add_parser("svg", help="render a vector map to SVG")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=20.0)
    p.set_defaults(func=_cmd_svg)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
