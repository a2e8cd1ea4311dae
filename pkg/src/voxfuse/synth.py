"""Seeded synthetic dataset of cuboid objects and image-only decoys.

Every scene holds car-sized cuboids on a ground plane. Half of them are
labeled objects, half are decoys whose LiDAR geometry and reflectance
are drawn from the *same* distribution; only the camera tells them
apart: labeled objects render as flat bright rectangles, decoys carry a
mean-preserving checkerboard texture. LiDAR-only models therefore have
no signal to reject decoys, image-fused models do.

The directory layout mirrors KITTI (velodyne/, calib/, label_2/,
image_2/, features/, ImageSets/) so real data drops in unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion, geometry, kitti_io
from .geometry import Box3D
from .kitti_io import Calibration, GroundTruthObject

LIDAR_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass
class SynthConfig:
    n_train: int = 200
    n_val: int = 50
    seed: int = 0
    image_width: int = 128
    image_height: int = 96
    focal: float = 64.0
    channels: int = 512
    feature_stride: float = 8.0
    min_objects: int = 2
    max_objects: int = 3          # per kind; placed boxes split half/half
    points_per_object: tuple = (50, 90)
    ground_points: int = 240
    base_size: tuple = (3.9, 1.6, 1.56)
    background: float = 0.30
    object_brightness: float = 0.75
    decoy_contrast: float = 0.10  # checker tiles at brightness +- contrast
    decoy_tile: int = 2           # pixels
    pixel_noise: float = 0.05


def synth_calibration(cfg: SynthConfig) -> Calibration:
    P = np.array([[cfg.focal, 0.0, cfg.image_width / 2, 0.0],
                  [0.0, cfg.focal, cfg.image_height / 2, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    Tr = np.hstack([LIDAR_TO_CAM, np.array([[0.02], [-0.05], [-0.10]])])
    return Calibration(P=P, R0=np.eye(3), Tr=Tr,
                       image_width=cfg.image_width,
                       image_height=cfg.image_height)


def _place_boxes(rng, cfg, calib, count):
    """Rejection-sample separated boxes whose image rects sit inside frame."""
    boxes = []
    attempts = 0
    while len(boxes) < count and attempts < 600:
        attempts += 1
        size = tuple(s * rng.uniform(0.85, 1.15) for s in cfg.base_size)
        # yaw stays clear of the +-pi/2 wrap so every rectangle has one
        # canonical orientation and consistent regression targets
        box = Box3D(center=(rng.uniform(3.2, 10.6), rng.uniform(-4.6, 4.6),
                            rng.uniform(-1.1, -0.9)),
                    size=size, yaw=rng.uniform(-1.35, 1.35))
        u, v, depth = geometry.project_points(geometry.box_corners_3d(box), calib)
        if (depth <= 0.5).any():
            continue
        if u.min() < 2 or u.max() > cfg.image_width - 3 \
                or v.min() < 2 or v.max() > cfg.image_height - 3:
            continue
        if any(math.hypot(box.center[0] - b.center[0],
                          box.center[1] - b.center[1]) < 4.0
               or geometry.bev_iou(box, b) > 0.02 for b in boxes):
            continue
        boxes.append(box)
    return boxes


def _cuboid_surface_points(rng, box: Box3D, n):
    """Points on the top and the four side faces, area-weighted."""
    l, w, h = box.size
    faces = [("top", l * w), ("front", w * h), ("back", w * h),
             ("left", l * h), ("right", l * h)]
    areas = np.array([a for _, a in faces])
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    local = np.empty((n, 3))
    for i, f in enumerate(choice):
        name = faces[f][0]
        a, b = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
        if name == "top":
            local[i] = (a * l, b * w, h / 2)
        elif name == "front":
            local[i] = (l / 2, a * w, b * h)
        elif name == "back":
            local[i] = (-l / 2, a * w, b * h)
        elif name == "left":
            local[i] = (a * l, w / 2, b * h)
        else:
            local[i] = (a * l, -w / 2, b * h)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(box.center)


def _ground_points(rng, cfg, calib, n):
    """Visible ground-plane returns; oversample then keep in-frustum."""
    m = n * 4
    xyz = np.column_stack([rng.uniform(2.5, 12.7, m),
                           rng.uniform(-6.3, 6.3, m),
                           rng.uniform(-1.80, -1.74, m)])
    u, v, depth = geometry.project_points(xyz, calib)
    ok = (depth > 0) & (u >= 0) & (u < cfg.image_width) \
        & (v >= 0) & (v < cfg.image_height)
    return xyz[ok][:n]


def _paint_rect(pixels, rect, value, rng, noise):
    left, top, right, bottom = (int(round(c)) for c in rect)
    h, w = pixels.shape[:2]
    left, right = max(left, 0), min(right, w - 1)
    top, bottom = max(top, 0), min(bottom, h - 1)
    if right < left or bottom < top:
        return
    block = value + rng.normal(0.0, noise, (bottom - top + 1, right - left + 1, 3))
    pixels[top:bottom + 1, left:right + 1] = block


def _paint_checker(pixels, rect, base, contrast, tile, rng, noise):
    left, top, right, bottom = (int(round(c)) for c in rect)
    h, w = pixels.shape[:2]
    left, right = max(left, 0), min(right, w - 1)
    top, bottom = max(top, 0), min(bottom, h - 1)
    if right < left or bottom < top:
        return
    vv, uu = np.meshgrid(np.arange(top, bottom + 1),
                         np.arange(left, right + 1), indexing="ij")
    phase = ((uu // tile) + (vv // tile)) % 2
    value = base + contrast * (2.0 * phase - 1.0)
    block = value[:, :, None] + rng.normal(
        0.0, noise, (bottom - top + 1, right - left + 1, 3))
    pixels[top:bottom + 1, left:right + 1] = block


@dataclass
class SceneRecord:
    points: np.ndarray         # (N, 4) float32
    true_boxes: list           # labeled Box3D, LiDAR frame
    decoy_boxes: list
    labels: list               # GroundTruthObject rows for label_2
    image: np.ndarray          # (H, W, 3) uint8
    fmap_data: np.ndarray      # (C, Hf, Wf) float32


def make_scene(rng, cfg: SynthConfig, calib: Calibration) -> SceneRecord:
    wanted = 2 * int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = _place_boxes(rng, cfg, calib, wanted)
    # exactly half the placed objects become decoys, whatever fit
    n_true = (len(boxes) + 1) // 2
    designation = rng.permutation(len(boxes)) < n_true
    true_boxes = [b for b, t in zip(boxes, designation) if t]
    decoy_boxes = [b for b, t in zip(boxes, designation) if not t]

    chunks = [_ground_points(rng, cfg, calib, cfg.ground_points)]
    for box in boxes:
        n = int(rng.integers(*cfg.points_per_object))
        chunks.append(_cuboid_surface_points(rng, box, n))
    xyz = np.vstack(chunks)
    refl = rng.uniform(0.25, 0.9, xyz.shape[0])
    points = np.column_stack([xyz, refl]).astype(np.float32)
    points = points[rng.permutation(points.shape[0])]

    labels = []
    for box in true_boxes:
        gt = geometry.lidar_box_to_camera(box, calib)
        x, _, z = gt.location
        gt.alpha = geometry.normalize_angle(gt.rotation_y - math.atan2(x, z))
        gt.bbox2d = geometry.box_image_rect(box, calib)
        labels.append(gt)

    pixels = cfg.background + rng.normal(
        0.0, cfg.pixel_noise, (cfg.image_height, cfg.image_width, 3))
    # painter's order: far objects first so near ones overwrite
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].center[0])
    for i in order:
        rect = geometry.box_image_rect(boxes[i], calib)
        if designation[i]:
            _paint_rect(pixels, rect, cfg.object_brightness, rng,
                        cfg.pixel_noise)
        else:
            _paint_checker(pixels, rect, cfg.object_brightness,
                           cfg.decoy_contrast, cfg.decoy_tile, rng,
                           cfg.pixel_noise)
    image = (np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)

    fmap = fusion.generate_feature_map(labels, cfg.image_width,
                                       cfg.image_height, cfg.channels,
                                       cfg.feature_stride)
    return SceneRecord(points=points, true_boxes=true_boxes,
                       decoy_boxes=decoy_boxes, labels=labels, image=image,
                       fmap_data=fmap.data)


def generate_dataset(out_dir, cfg: SynthConfig):
    """Write the full KITTI-layout dataset; returns (train, val) frame lists."""
    out = Path(out_dir)
    for sub in ("velodyne", "calib", "label_2", "image_2", "features",
                "ImageSets"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    calib = synth_calibration(cfg)
    total = cfg.n_train + cfg.n_val
    frames = [f"{i:06d}" for i in range(total)]
    for i, frame in enumerate(frames):
        scene = make_scene(np.random.default_rng([cfg.seed, i]), cfg, calib)
        kitti_io.write_point_cloud(out / "velodyne" / f"{frame}.bin",
                                   scene.points)
        kitti_io.write_calibration(out / "calib" / f"{frame}.txt", calib)
        kitti_io.write_labels(out / "label_2" / f"{frame}.txt", scene.labels)
        kitti_io.write_image(out / "image_2" / f"{frame}.ppm", scene.image)
        kitti_io.write_tensor(out / "features" / f"{frame}.npy",
                              scene.fmap_data, stride=cfg.feature_stride)
    train = frames[:cfg.n_train]
    val = frames[cfg.n_train:]
    (out / "ImageSets" / "train.txt").write_text("\n".join(train) + "\n")
    (out / "ImageSets" / "val.txt").write_text(
        ("\n".join(val) + "\n") if val else "")
    return train, val
