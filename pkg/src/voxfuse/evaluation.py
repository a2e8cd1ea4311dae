"""KITTI-protocol detection scoring.

Ground truth is bucketed into Easy / Moderate / Hard by projected 2D
height, occlusion, and truncation; detections are greedily matched per
scene by descending score; precision-recall is accumulated over a
global score ranking and summarized with interpolated average
precision. A synthetic "All" bucket skips difficulty filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import SceneMismatch
from .geometry import Box3D, bev_iou, iou_3d

# (min 2D box height px, max occlusion, max truncation)
DIFFICULTY_THRESHOLDS = {
    "Easy": (40.0, 0, 0.15),
    "Moderate": (25.0, 1, 0.30),
    "Hard": (25.0, 2, 0.50),
}
BUCKETS = ("Easy", "Moderate", "Hard")
IGNORED = "Ignored"

IOU_FNS = {"bev": bev_iou, "3d": iou_3d}


def bucket(gt) -> str:
    """Most favorable difficulty whose thresholds all pass, else Ignored."""
    height = gt.bbox2d[3] - gt.bbox2d[1]
    for name in BUCKETS:
        min_h, max_occ, max_trunc = DIFFICULTY_THRESHOLDS[name]
        if height >= min_h and gt.occlusion <= max_occ \
                and gt.truncation <= max_trunc:
            return name
    return IGNORED


# eligibility cap per evaluated bucket; "All" admits every labeled object
_BUCKET_RANK = {"Easy": 0, "Moderate": 1, "Hard": 2, IGNORED: 3, "All": 3}


def _bucket_rank(name):
    return _BUCKET_RANK[name]


@dataclass
class GtScene:
    """Per-scene ground truth ready for matching."""

    boxes: list       # Box3D or None when geometry is unusable (DontCare rows)
    buckets: list     # difficulty name per entry
    dont_care: list   # bool per entry


@dataclass
class DetScene:
    boxes: list
    scores: list


def gt_scene_from_labels(labels, calib) -> GtScene:
    boxes, buckets, dont_care = [], [], []
    for obj in labels:
        usable = min(obj.dims) > 0
        boxes.append(geometry.camera_label_to_lidar_box(obj, calib)
                     if usable else None)
        buckets.append(bucket(obj))
        dont_care.append(obj.dont_care)
    return GtScene(boxes=boxes, buckets=buckets, dont_care=dont_care)


def det_scene_from_labels(labels, calib) -> DetScene:
    boxes = [geometry.camera_label_to_lidar_box(obj, calib) for obj in labels]
    scores = [obj.score if obj.score is not None else 0.0 for obj in labels]
    return DetScene(boxes=boxes, scores=scores)


def match(dets: DetScene, gts: GtScene, iou_fn, threshold, max_bucket="Hard"):
    """Greedy per-scene matching in descending score order.

    A detection claims the unmatched eligible ground truth of highest
    IoU >= threshold (TP); failing that, an overlapping ignore-class
    entry (harder bucket, Ignored, DontCare) makes it neither TP nor
    FP; otherwise it is an FP. Returns (tp, fp, matched_gt) aligned
    with the detection order.
    """
    rank_cap = _bucket_rank(max_bucket)
    eligible = [not dc and _bucket_rank(b) <= rank_cap and box is not None
                for box, b, dc in zip(gts.boxes, gts.buckets, gts.dont_care)]
    order = sorted(range(len(dets.boxes)),
                   key=lambda i: (-dets.scores[i], i))
    taken = [False] * len(gts.boxes)
    tp = [False] * len(dets.boxes)
    fp = [False] * len(dets.boxes)
    matched_gt = [-1] * len(dets.boxes)
    for i in order:
        best_j, best_iou = -1, threshold
        for j, gt_box in enumerate(gts.boxes):
            if taken[j] or not eligible[j] or gt_box is None:
                continue
            iou = iou_fn(dets.boxes[i], gt_box)
            if iou > best_iou or (iou == best_iou and best_j == -1):
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
            matched_gt[i] = best_j
            continue
        hits_ignored = any(
            gt_box is not None and not eligible[j]
            and iou_fn(dets.boxes[i], gt_box) >= threshold
            for j, gt_box in enumerate(gts.boxes))
        if not hits_ignored:
            fp[i] = True
    return tp, fp, matched_gt


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray


def average_precision(curve: PrCurve, mode="11point") -> float:
    """Interpolated AP: mean of max precision at recall >= r over a grid."""
    if mode == "11point":
        grid = np.arange(11) / 10.0
    elif mode == "40point":
        grid = np.arange(1, 41) / 40.0
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    total = 0.0
    for r in grid:
        at_least = curve.precision[curve.recall >= r - 1e-12]
        total += float(at_least.max()) if at_least.size else 0.0
    return total / len(grid)


@dataclass
class ApCell:
    ap: float
    gt_count: int
    det_count: int


def evaluate(dets_by_scene, gts_by_scene, criteria=None, buckets=BUCKETS,
             mode="11point"):
    """Score pooled scenes per (criterion, IoU threshold, bucket) cell.

    ``criteria`` is a list of (kind, threshold) with kind "bev" or "3d".
    Detections are ranked globally by score (ties by scene order then
    index); ground truth counts exclude ignore-class entries.
    """
    if criteria is None:
        criteria = [("bev", 0.7), ("bev", 0.8), ("3d", 0.7), ("3d", 0.8)]
    if set(dets_by_scene.keys()) != set(gts_by_scene.keys()):
        raise SceneMismatch("detection and ground-truth scene sets differ")
    scene_ids = sorted(gts_by_scene.keys())
    table = {}
    for kind, threshold in criteria:
        iou_fn = IOU_FNS[kind]
        for bucket_name in buckets:
            records = []   # (score, scene_order, det_index, tp, fp)
            n_gt = 0
            n_det = 0
            for s_order, sid in enumerate(scene_ids):
                dets = dets_by_scene[sid]
                gts = gts_by_scene[sid]
                n_det += len(dets.boxes)
                n_gt += sum(1 for b, dc, box in
                            zip(gts.buckets, gts.dont_care, gts.boxes)
                            if not dc and box is not None
                            and _bucket_rank(b) <= _bucket_rank(bucket_name))
                tp, fp, _ = match(dets, gts, iou_fn, threshold, bucket_name)
                for i, score in enumerate(dets.scores):
                    if tp[i] or fp[i]:
                        records.append((score, s_order, i, tp[i], fp[i]))
            records.sort(key=lambda r: (-r[0], r[1], r[2]))
            if n_gt == 0:
                table[(kind, threshold, bucket_name)] = ApCell(0.0, 0, n_det)
                continue
            tps = np.cumsum([r[3] for r in records])
            fps = np.cumsum([r[4] for r in records])
            if len(records) == 0:
                curve = PrCurve(np.zeros(1), np.zeros(1))
            else:
                recall = tps / n_gt
                precision = tps / np.maximum(tps + fps, 1)
                curve = PrCurve(recall, precision)
            ap = average_precision(curve, mode)
            table[(kind, threshold, bucket_name)] = ApCell(ap, n_gt, n_det)
    return table


def format_table(table) -> str:
    """Aligned text rendering of an evaluate() result."""
    lines = [f"{'criterion':<10}{'IoU':>5}  {'bucket':<9}{'AP%':>8}"
             f"{'gt':>7}{'det':>7}"]
    for (kind, thr, bucket_name), cell in sorted(table.items()):
        lines.append(f"{kind:<10}{thr:>5.2f}  {bucket_name:<9}"
                     f"{100 * cell.ap:>8.2f}{cell.gt_count:>7}{cell.det_count:>7}")
    return "\n".join(lines)


def to_csv(table) -> str:
    lines = ["criterion,iou,bucket,ap,gt_count,det_count"]
    for (kind, thr, bucket_name), cell in sorted(table.items()):
        lines.append(f"{kind},{thr},{bucket_name},{cell.ap:.6f},"
                     f"{cell.gt_count},{cell.det_count}")
    return "\n".join(lines) + "\n"
