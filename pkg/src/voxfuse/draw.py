"""Project boxes onto images as 1-pixel wireframes.

Pure rendering: detection data is never modified. Matched detections
draw green, ground truth blue; missed ground truth and false-positive
detections are highlighted red, decided by BEV IoU matching.
"""

from __future__ import annotations

import numpy as np

from . import geometry
from .kitti_io import Calibration, Image

DETECTION_COLOR = (60, 220, 60)
GT_COLOR = (90, 140, 255)
HIGHLIGHT_COLOR = (255, 60, 50)

_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0),
          (4, 5), (5, 6), (6, 7), (7, 4),
          (0, 4), (1, 5), (2, 6), (3, 7)]


def _clip_segment(u0, v0, u1, v1, width, height):
    """Liang-Barsky clip to [0, width-1] x [0, height-1]; None if outside."""
    t0, t1 = 0.0, 1.0
    du, dv = u1 - u0, v1 - v0
    for p, q in ((-du, u0), (du, width - 1 - u0), (-dv, v0), (dv, height - 1 - v0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return (u0 + t0 * du, v0 + t0 * dv, u0 + t1 * du, v0 + t1 * dv)


def _draw_line(pixels, u0, v0, u1, v1, color):
    clipped = _clip_segment(u0, v0, u1, v1, pixels.shape[1], pixels.shape[0])
    if clipped is None:
        return
    x0, y0, x1, y1 = (int(round(c)) for c in clipped)
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= y0 < pixels.shape[0] and 0 <= x0 < pixels.shape[1]:
            pixels[y0, x0] = color
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_box(pixels, box, calib: Calibration, color):
    u, v, depth = geometry.project_points(geometry.box_corners_3d(box), calib)
    for a, b in _EDGES:
        if depth[a] <= 0.1 or depth[b] <= 0.1:
            continue
        _draw_line(pixels, u[a], v[a], u[b], v[b], color)


def draw_scene(image: Image, calib: Calibration, detections, gt_boxes,
               iou_threshold=0.5) -> Image:
    """Render boxes on a copy of the image; misses and FPs turn red."""
    pixels = image.pixels.copy()
    gt_boxes = gt_boxes or []
    detections = sorted(detections, key=lambda d: -d.score)
    matched_gt = set()
    det_matched = []
    for det in detections:
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gt_boxes):
            if j in matched_gt:
                continue
            iou = geometry.bev_iou(det.box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched_gt.add(best)
        det_matched.append(best >= 0)
    for j, gt in enumerate(gt_boxes):
        draw_box(pixels, gt, calib,
                 GT_COLOR if j in matched_gt else HIGHLIGHT_COLOR)
    for det, ok in zip(detections, det_matched):
        draw_box(pixels, det.box, calib,
                 DETECTION_COLOR if ok else HIGHLIGHT_COLOR)
    return Image(pixels)
