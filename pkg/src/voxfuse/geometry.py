"""Coordinate-frame math: projection, voxelization, oriented-box IoU, NMS.

LiDAR frame: x forward, y left, z up. Camera frame (rectified): x right,
y down, z forward. Detection boxes are 7-DOF: center, size (l, w, h) and
yaw about +z, with yaw normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyVoxel, NonPositiveSize, SingularTransform
from .kitti_io import Calibration, GroundTruthObject, PointCloud


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the LiDAR frame."""

    center: tuple  # (x, y, z) meters
    size: tuple    # (l, w, h) meters
    yaw: float     # radians about +z

    def __post_init__(self):
        if min(self.size) <= 0:
            raise NonPositiveSize(f"box size {self.size} must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))


@dataclass(frozen=True)
class ProjectedPoint:
    u: float
    v: float
    depth: float
    in_image: bool


def _homogeneous_chain(calib: Calibration) -> tuple:
    T4 = np.eye(4)
    T4[:3, :] = calib.Tr
    R4 = np.eye(4)
    R4[:3, :3] = calib.R0
    return calib.P, R4, T4


def project_points(xyz, calib: Calibration):
    """Vectorized LiDAR-to-image projection.

    Returns (u, v, depth) arrays; u, v are original-image pixel
    coordinates and depth is rectified camera z (meters). Points at
    exactly zero depth get an epsilon-guarded division.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    P, R4, T4 = _homogeneous_chain(calib)
    hom = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
    y = (P @ (R4 @ (T4 @ hom.T)))
    depth = y[2]
    safe = np.where(np.abs(depth) < 1e-300, 1e-300, depth)
    return y[0] / safe, y[1] / safe, depth


def lidar_to_image(points: PointCloud, calib: Calibration) -> list[ProjectedPoint]:
    u, v, depth = project_points(points.xyz, calib)
    inside = (depth > 0) & (u >= 0) & (u < calib.image_width) \
        & (v >= 0) & (v < calib.image_height)
    return [ProjectedPoint(float(u[i]), float(v[i]), float(depth[i]), bool(inside[i]))
            for i in range(len(points))]


def crop_to_frustum(points: PointCloud, calib: Calibration) -> PointCloud:
    """Keep the points that project inside the image with positive depth."""
    if len(points) == 0:
        return points
    u, v, depth = project_points(points.xyz, calib)
    inside = (depth > 0) & (u >= 0) & (u < calib.image_width) \
        & (v >= 0) & (v < calib.image_height)
    return PointCloud(points.xyzr[inside])


def _rigid_lidar_to_camera(calib: Calibration):
    M = calib.R0 @ calib.Tr[:, :3]
    t = calib.R0 @ calib.Tr[:, 3]
    if abs(np.linalg.det(M)) < 1e-9:
        raise SingularTransform("LiDAR-to-camera rotation block is singular")
    return M, t


def camera_label_to_lidar_box(gt: GroundTruthObject, calib: Calibration) -> Box3D:
    """Convert a camera-frame label to an oriented LiDAR-frame box.

    The label location is the bottom-face center; camera y points down,
    so the geometric center sits at y - h/2. Yaw follows the standard
    relation lidar_yaw = -rotation_y - pi/2.
    """
    M, t = _rigid_lidar_to_camera(calib)
    h, w, l = gt.dims
    center_cam = np.array(gt.location, dtype=np.float64) + [0.0, -h / 2.0, 0.0]
    center_lidar = np.linalg.solve(M, center_cam - t)
    return Box3D(center=tuple(center_lidar), size=(l, w, h),
                 yaw=normalize_angle(-gt.rotation_y - math.pi / 2.0))


def lidar_box_to_camera(box: Box3D, calib: Calibration) -> GroundTruthObject:
    """Inverse of camera_label_to_lidar_box; only geometry fields are set."""
    M, t = _rigid_lidar_to_camera(calib)
    l, w, h = box.size
    center_cam = M @ np.asarray(box.center, dtype=np.float64) + t
    location = center_cam + [0.0, h / 2.0, 0.0]
    return GroundTruthObject(
        class_name="Car", truncation=0.0, occlusion=0, alpha=0.0,
        bbox2d=(0.0, 0.0, 0.0, 0.0), dims=(h, w, l),
        location=tuple(float(v) for v in location),
        rotation_y=normalize_angle(-box.yaw - math.pi / 2.0))


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelGridConfig:
    """Equally spaced partition of the crop range.

    The range extent must be an integer multiple of the voxel size on
    every axis (within 1e-9); at most ``max_points`` are retained per
    voxel, chosen by a per-voxel RNG stream derived from ``rng_seed``.
    """

    range_min: tuple  # (x, y, z) meters
    range_max: tuple
    voxel_size: tuple  # (v_W, v_H, v_D): edge lengths along x, y, z
    max_points: int = 35
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_points < 1:
            raise ValueError("max_points must be >= 1")
        for lo, hi, v in zip(self.range_min, self.range_max, self.voxel_size):
            ratio = (hi - lo) / v
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(
                    f"range extent {hi - lo} is not a multiple of voxel size {v}")

    @property
    def grid_shape(self):
        """Cell counts (nx, ny, nz)."""
        return tuple(int(round((hi - lo) / v)) for lo, hi, v in
                     zip(self.range_min, self.range_max, self.voxel_size))


@dataclass(frozen=True)
class Voxel:
    index: tuple       # (iw, ih, id) integer grid coordinates
    points: np.ndarray  # (n, 4) retained points, n <= max_points
    centroid: tuple    # arithmetic mean of retained xyz


@dataclass(frozen=True)
class VoxelGrid:
    cfg: VoxelGridConfig
    voxels: list
    point_voxel: np.ndarray  # per input point: voxel position, -1 if dropped

    def __len__(self):
        return len(self.voxels)


def voxel_cell_bounds(index, cfg: VoxelGridConfig):
    lo = np.asarray(cfg.range_min, dtype=np.float64) \
        + np.asarray(index, dtype=np.float64) * np.asarray(cfg.voxel_size)
    return lo, lo + np.asarray(cfg.voxel_size)


def voxelize(points: PointCloud, cfg: VoxelGridConfig) -> VoxelGrid:
    """Group points into grid cells, subsampling crowded cells to max_points.

    Cell assignment is floor((p - range_min) / voxel_size); out-of-range
    points are dropped. Subsampling draws a uniform subset with an RNG
    seeded by (rng_seed, cell index), so the result is independent of
    point processing order; retained points keep their original order.
    """
    n = len(points)
    point_voxel = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return VoxelGrid(cfg, [], point_voxel)
    xyz = points.xyzr[:, :3].astype(np.float64)
    rmin = np.asarray(cfg.range_min)
    vsize = np.asarray(cfg.voxel_size)
    shape = cfg.grid_shape
    idx = np.floor((xyz - rmin) / vsize).astype(np.int64)
    in_range = np.all((idx >= 0) & (idx < np.asarray(shape)), axis=1)
    kept = np.nonzero(in_range)[0]
    if kept.size == 0:
        return VoxelGrid(cfg, [], point_voxel)
    linear = (idx[kept, 0] * shape[1] + idx[kept, 1]) * shape[2] + idx[kept, 2]
    order = np.argsort(linear, kind="stable")
    sorted_linear = linear[order]
    boundaries = np.nonzero(np.diff(sorted_linear))[0] + 1
    groups = np.split(order, boundaries)
    voxels = []
    for pos, group in enumerate(groups):
        members = kept[group]  # original indices, ascending (stable sort)
        iw, ih, iz = (int(v) for v in idx[members[0]])
        if members.size > cfg.max_points:
            rng = np.random.default_rng([cfg.rng_seed, iw, ih, iz])
            chosen = rng.choice(members.size, size=cfg.max_points, replace=False)
            members = members[np.sort(chosen)]
        pts = points.xyzr[members]
        centroid = tuple(pts[:, :3].astype(np.float64).mean(axis=0))
        voxels.append(Voxel(index=(iw, ih, iz), points=pts, centroid=centroid))
        point_voxel[members] = pos
    return VoxelGrid(cfg, voxels, point_voxel)


def decorate(voxel: Voxel) -> np.ndarray:
    """7-dim rows [x, y, z, r, x-cx, y-cy, z-cz] relative to the centroid."""
    if voxel.points.shape[0] == 0:
        raise EmptyVoxel("cannot decorate an empty voxel")
    pts = voxel.points.astype(np.float64)
    offsets = pts[:, :3] - np.asarray(voxel.centroid)
    return np.hstack([pts, offsets])


# ---------------------------------------------------------------------------
# oriented-box IoU and NMS
# ---------------------------------------------------------------------------

def box_corners_bev(box: Box3D) -> np.ndarray:
    """(4, 2) BEV corners, counter-clockwise."""
    l, w, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2],
                      [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(box.center[:2])


def box_corners_3d(box: Box3D) -> np.ndarray:
    """(8, 3) corners: BEV corners at bottom then top."""
    bev = box_corners_bev(box)
    h = box.size[2]
    z0, z1 = box.center[2] - h / 2, box.center[2] + h / 2
    bottom = np.hstack([bev, np.full((4, 1), z0)])
    top = np.hstack([bev, np.full((4, 1), z1)])
    return np.vstack([bottom, top])


def box_standup_bev(box: Box3D) -> tuple:
    """Axis-aligned BEV footprint (x1, y1, x2, y2) of the rotated corners."""
    c = box_corners_bev(box)
    return (float(c[:, 0].min()), float(c[:, 1].min()),
            float(c[:, 0].max()), float(c[:, 1].max()))


def _polygon_area(poly) -> float:
    """Shoelace area; positive for counter-clockwise winding."""
    total = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return abs(total) / 2.0


def _clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW clipper."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            return []
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_poly = output
        output = []
        m = len(input_poly)
        for j in range(m):
            px, py = input_poly[j]
            qx, qy = input_poly[(j + 1) % m]
            p_in = ex * (py - ay) - ey * (px - ax) >= -1e-12
            q_in = ex * (qy - ay) - ey * (qx - ax) >= -1e-12
            if p_in:
                output.append((px, py))
            if p_in != q_in:
                denom = ex * (qy - py) - ey * (qx - px)
                if abs(denom) > 1e-300:
                    t = (ex * (ay - py) - ey * (ax - px)) / denom
                    output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    ca = [tuple(p) for p in box_corners_bev(a)]
    cb = [tuple(p) for p in box_corners_bev(b)]
    clipped = _clip_polygon(ca, cb)
    if len(clipped) < 3:
        return 0.0
    return _polygon_area(clipped)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated BEV rectangles via polygon clipping."""
    # reach test: rectangles further apart than their half-diagonals
    # cannot intersect, so skip the polygon work
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    reach = (math.hypot(a.size[0], a.size[1])
             + math.hypot(b.size[0], b.size[1])) / 2.0
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    ca = [tuple(p) for p in box_corners_bev(a)]
    cb = [tuple(p) for p in box_corners_bev(b)]
    clipped = _clip_polygon(ca, cb)
    inter = _polygon_area(clipped) if len(clipped) >= 3 else 0.0
    area_a = _polygon_area(ca)
    area_b = _polygon_area(cb)
    union = area_a + area_b - inter
    if union < 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection area times vertical overlap length."""
    inter_area = bev_intersection_area(a, b)
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    overlap = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter_vol = inter_area * overlap
    vol_a = a.size[0] * a.size[1] * a.size[2]
    vol_b = b.size[0] * b.size[1] * b.size[2]
    union = vol_a + vol_b - inter_vol
    if union < 1e-12:
        return 0.0
    return min(max(inter_vol / union, 0.0), 1.0)


def nms_bev(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS by descending score; ties keep the lower original index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS scores must be finite")
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        box = boxes[i]
        if all(bev_iou(box, boxes[k]) < iou_threshold for k in kept):
            kept.append(int(i))
    return kept


# ---------------------------------------------------------------------------
# voxel ROI projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Roi:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    valid: bool


def project_voxel_rois(indices, cfg: VoxelGridConfig, calib: Calibration):
    """Vectorized voxel-cell ROI projection for (K, 3) cell indices.

    Returns (u_min, v_min, u_max, v_max, valid) arrays. A cell is
    invalid when every corner is behind the camera or the corner rect
    misses the image entirely; valid rects are clipped to the image.
    """
    indices = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    k = indices.shape[0]
    lo = np.asarray(cfg.range_min) + indices * np.asarray(cfg.voxel_size)
    hi = lo + np.asarray(cfg.voxel_size)
    corners = np.empty((k, 8, 3))
    for c, (ix, iy, iz) in enumerate(((a, b, d) for a in range(2)
                                     for b in range(2) for d in range(2))):
        corners[:, c, 0] = hi[:, 0] if ix else lo[:, 0]
        corners[:, c, 1] = hi[:, 1] if iy else lo[:, 1]
        corners[:, c, 2] = hi[:, 2] if iz else lo[:, 2]
    u, v, depth = project_points(corners.reshape(-1, 3), calib)
    u = u.reshape(k, 8)
    v = v.reshape(k, 8)
    depth = depth.reshape(k, 8)
    u_min, u_max = u.min(axis=1), u.max(axis=1)
    v_min, v_max = v.min(axis=1), v.max(axis=1)
    w, h = calib.image_width - 1.0, calib.image_height - 1.0
    valid = (depth > 0).any(axis=1) & (u_max >= 0) & (u_min <= w) \
        & (v_max >= 0) & (v_min <= h)
    u_min = np.where(valid, np.clip(u_min, 0, w), 0.0)
    u_max = np.where(valid, np.clip(u_max, 0, w), 0.0)
    v_min = np.where(valid, np.clip(v_min, 0, h), 0.0)
    v_max = np.where(valid, np.clip(v_max, 0, h), 0.0)
    return u_min, v_min, u_max, v_max, valid


def project_voxel_roi(index, cfg: VoxelGridConfig, calib: Calibration) -> Roi:
    """Single-cell variant of project_voxel_rois."""
    u_min, v_min, u_max, v_max, valid = project_voxel_rois([index], cfg, calib)
    return Roi(float(u_min[0]), float(v_min[0]), float(u_max[0]),
               float(v_max[0]), bool(valid[0]))


def box_image_rect(box: Box3D, calib: Calibration) -> tuple:
    """2D bounding rect of the projected 3D box corners, image-clipped."""
    u, v, depth = project_points(box_corners_3d(box), calib)
    front = depth > 0
    if not front.any():
        return (0.0, 0.0, 0.0, 0.0)
    w, h = calib.image_width - 1, calib.image_height - 1
    return (float(np.clip(u[front].min(), 0, w)),
            float(np.clip(v[front].min(), 0, h)),
            float(np.clip(u[front].max(), 0, w)),
            float(np.clip(v[front].max(), 0, h)))
