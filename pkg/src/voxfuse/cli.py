"""Command-line interface for the whole pipeline.

Subcommands: inspect, gen-synth, fuse, train, infer, eval, draw. Every
command is deterministic given --seed; exit code 2 flags usage errors,
1 runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import detector, draw, evaluation, fusion, geometry, kitti_io, synth
from .config import load_config, toy_config
from .errors import VoxfuseError


def _resolve_config(args, mode_default="lidar"):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if getattr(args, "mode", None):
            from dataclasses import replace
            cfg = replace(cfg, fusion_mode=args.mode)
        return cfg
    return toy_config(getattr(args, "mode", None) or mode_default)


def _apply_seed(cfg, seed):
    if seed is None:
        return cfg
    from dataclasses import replace
    return replace(cfg, seed=seed)


def cmd_inspect(args):
    cfg = _apply_seed(_resolve_config(args), args.seed)
    scene = detector.load_scene(cfg, args.root, args.frame)
    n_gt = len(scene.gt_boxes) if scene.gt_boxes is not None else 0
    print(f"frame {args.frame}: {scene.n_points} points, "
          f"{scene.n_voxels} non-empty voxels, {n_gt} ground-truth objects")
    return 0


def cmd_gen_synth(args):
    cfg = synth.SynthConfig(n_train=args.train, n_val=args.val, seed=args.seed,
                            channels=args.channels)
    train, val = synth.generate_dataset(args.out, cfg)
    print(f"wrote {len(train)} train + {len(val)} val scenes to {args.out}")
    return 0


def cmd_fuse(args):
    cfg = _apply_seed(_resolve_config(args, mode_default="pointfusion"),
                      args.seed)
    rng = np.random.default_rng(cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = detector.load_scene(cfg, args.root, args.frame, with_targets=False)
    if cfg.fusion_mode == "pointfusion":
        reducer = fusion.FeatureReducer.for_point_fusion(rng)
        cloud = kitti_io.read_point_cloud(
            Path(args.root) / "velodyne" / f"{args.frame}.bin")
        calib = kitti_io.read_calibration(
            Path(args.root) / "calib" / f"{args.frame}.txt")
        fused = fusion.point_fusion(cloud, calib, scene.fmap, reducer,
                                    cfg.voxel_cfg())
        np.save(out / f"{args.frame}_rows.npy", fused.rows.astype(np.float32))
        np.save(out / f"{args.frame}_mask.npy", fused.mask)
        np.save(out / f"{args.frame}_coords.npy", fused.voxel_coords)
        print(f"{args.frame}: {fused.rows.shape[0]} voxels, "
              f"rows dim {fused.rows.shape[2]}")
    elif cfg.fusion_mode == "voxelfusion":
        net = detector.DetectionNet(cfg)  # seeded, untrained VFE stack
        rows = net.encode_voxels(scene, train=False)
        if rows is None:
            rows = np.zeros((0, net.voxel_dim), dtype=np.float32)
        np.save(out / f"{args.frame}_rows.npy", rows.astype(np.float32))
        np.save(out / f"{args.frame}_coords.npy", scene.coords)
        print(f"{args.frame}: {rows.shape[0]} voxels, rows dim {rows.shape[1]}")
    else:
        print("fuse requires --mode pointfusion or voxelfusion",
              file=sys.stderr)
        return 2
    return 0


def cmd_train(args):
    cfg = _apply_seed(_resolve_config(args), args.seed)
    if args.epochs:
        cfg.schedule.epochs = args.epochs
        cfg.schedule.decay_epoch = max(1, int(args.epochs * 2 / 3))
    net = detector.DetectionNet(cfg)
    scenes = detector.load_dataset(cfg, args.root, args.split, net.anchors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve = detector.train(net, scenes, out_dir=out,
                           log_fn=lambda e, l: print(f"epoch {e}: loss {l:.4f}"))
    (out / "loss_curve.txt").write_text(
        "\n".join(f"{v:.6f}" for v in curve) + "\n")
    print(f"final loss {curve[-1]:.4f}; checkpoints in {out}")
    return 0


def cmd_infer(args):
    cfg = _apply_seed(_resolve_config(args), args.seed)
    net = detector.DetectionNet(cfg)
    net.load(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = detector.list_frames(args.root, args.split)
    total = 0
    for frame in frames:
        scene = detector.load_scene(cfg, args.root, frame, with_targets=False)
        dets = detector.infer(net, scene)
        calib = kitti_io.read_calibration(
            Path(args.root) / "calib" / f"{frame}.txt")
        kitti_io.write_detections(out / f"{frame}.txt", dets, calib)
        total += len(dets)
    print(f"wrote detections for {len(frames)} frames "
          f"({total} boxes) to {out}")
    return 0


def cmd_eval(args):
    gt_root = Path(args.gt_root)
    det_dir = Path(args.det)
    frames = detector.list_frames(gt_root, args.split)
    gts, dets = {}, {}
    for frame in frames:
        calib = kitti_io.read_calibration(gt_root / "calib" / f"{frame}.txt")
        labels = kitti_io.read_labels(gt_root / "label_2" / f"{frame}.txt")
        gts[frame] = evaluation.gt_scene_from_labels(labels, calib)
        det_path = det_dir / f"{frame}.txt"
        rows = kitti_io.read_labels(det_path) if det_path.exists() else []
        dets[frame] = evaluation.det_scene_from_labels(rows, calib)
    criteria = [(kind, thr) for kind in args.criterion for thr in args.iou]
    table = evaluation.evaluate(dets, gts, criteria=criteria,
                                buckets=tuple(args.buckets), mode=args.interp)
    print(evaluation.format_table(table))
    if args.out:
        Path(args.out).write_text(evaluation.to_csv(table))
        print(f"csv written to {args.out}")
    return 0


def cmd_draw(args):
    root = Path(args.root)
    image = kitti_io.read_image(root / "image_2" / f"{args.frame}.ppm")
    calib = kitti_io.read_calibration(root / "calib" / f"{args.frame}.txt",
                                      image_width=image.width,
                                      image_height=image.height)
    gt_boxes = []
    label_path = root / "label_2" / f"{args.frame}.txt"
    if label_path.exists():
        gt_boxes = [geometry.camera_label_to_lidar_box(obj, calib)
                    for obj in kitti_io.read_labels(label_path)
                    if not obj.dont_care]
    detections = []
    if args.det:
        rows = kitti_io.read_labels(Path(args.det) / f"{args.frame}.txt")
        detections = [kitti_io.Detection(
            box=geometry.camera_label_to_lidar_box(obj, calib),
            score=obj.score if obj.score is not None else 0.0,
            class_name=obj.class_name) for obj in rows]
    rendered = draw.draw_scene(image, calib, detections, gt_boxes,
                               iou_threshold=args.iou)
    kitti_io.write_image(args.out, rendered.pixels)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxfuse",
        description="LiDAR-camera fusion 3D detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print scene statistics")
    p.add_argument("--root", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--mode", choices=["lidar", "pointfusion", "voxelfusion",
                                      "rawpatch3", "rawpatch5"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=512)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("fuse", help="write fused tensors for one scene")
    p.add_argument("--root", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--mode", default="pointfusion",
                   choices=["pointfusion", "voxelfusion"])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--root", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--mode", default="lidar",
                   choices=["lidar", "pointfusion", "voxelfusion",
                            "rawpatch3", "rawpatch5"])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run inference and write results")
    p.add_argument("--root", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", default="lidar",
                   choices=["lidar", "pointfusion", "voxelfusion",
                            "rawpatch3", "rawpatch5"])
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score detections against labels")
    p.add_argument("--gt-root", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--iou", type=float, nargs="+", default=[0.7, 0.8])
    p.add_argument("--criterion", nargs="+", default=["bev", "3d"],
                   choices=["bev", "3d"])
    p.add_argument("--buckets", nargs="+",
                   default=["Easy", "Moderate", "Hard"])
    p.add_argument("--interp", default="11point",
                   choices=["11point", "40point"])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("draw", help="render boxes onto the scene image")
    p.add_argument("--root", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--det")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_draw)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (VoxfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
