"""Attach image evidence to LiDAR data.

Three granularities: per point (each visible point picks up a reduced
per-pixel feature), per voxel (each non-empty voxel pools features over
its projected ROI), and raw pixel patches for the ablation path. Also
hosts the synthetic feature-map generator used by tests and the toy
benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import NoVisiblePoints, ShapeMismatch
from .geometry import VoxelGrid, VoxelGridConfig
from .kitti_io import Calibration, FeatureMap, Image, PointCloud
from .neural import FcnLayer

POINT_REDUCER_DIMS = (512, 96, 16)
VOXEL_REDUCER_DIMS = (512, 128, 64)
ROI_POOL_GRID = 7  # bilinear samples per ROI axis


class FeatureReducer:
    """Two stacked FC+BN+ReLU layers shrinking image features.

    Point mode reduces 512 -> 96 -> 16, voxel mode 512 -> 128 -> 64.
    Arbitrary dims are allowed for desk-scale gradient checks but the
    public fusion entry points insist on the canonical configurations.
    """

    def __init__(self, dims, rng, dtype=np.float32, mode="custom"):
        if len(dims) != 3:
            raise ValueError("reducer wants (input, hidden, output) dims")
        self.dims = tuple(dims)
        self.mode = mode
        self.layers = [FcnLayer(dims[0], dims[1], rng, dtype),
                       FcnLayer(dims[1], dims[2], rng, dtype)]

    @classmethod
    def for_point_fusion(cls, rng, dtype=np.float32):
        return cls(POINT_REDUCER_DIMS, rng, dtype, mode="point")

    @classmethod
    def for_voxel_fusion(cls, rng, dtype=np.float32):
        return cls(VOXEL_REDUCER_DIMS, rng, dtype, mode="voxel")

    @property
    def out_dim(self):
        return self.dims[2]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


def _cell_coords(fmap: FeatureMap, u, v):
    scale = fmap.rescale / fmap.stride
    return np.asarray(u, dtype=np.float64) * scale, \
        np.asarray(v, dtype=np.float64) * scale


def sample_features(fmap: FeatureMap, u, v, method="bilinear"):
    """Sample the map at original-image pixel positions, one row per point.

    Cell centers sit at integer feature coordinates; coordinates clamp
    to the map border. ``method`` is "bilinear" or "nearest".
    """
    cx, cy = _cell_coords(fmap, u, v)
    h, w = fmap.height, fmap.width
    cx = np.clip(cx, 0.0, w - 1.0)
    cy = np.clip(cy, 0.0, h - 1.0)
    # channel-last copy so each gathered feature vector is contiguous
    hwc = np.ascontiguousarray(fmap.data.transpose(1, 2, 0))
    if method == "nearest":
        ix = np.floor(cx + 0.5).astype(np.int64)
        iy = np.floor(cy + 0.5).astype(np.int64)
        return hwc[iy, ix].astype(np.float64)
    if method != "bilinear":
        raise ValueError(f"unknown sampling method {method!r}")
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # interpolate in the map's dtype; float64 weights would 8x the traffic
    fx = (cx - x0).astype(hwc.dtype)[:, None]
    fy = (cy - y0).astype(hwc.dtype)[:, None]
    top = hwc[y0, x0] * (1 - fx) + hwc[y0, x1] * fx
    bot = hwc[y1, x0] * (1 - fx) + hwc[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float64)


def sample_feature(fmap: FeatureMap, u, v, method="bilinear"):
    """Single-point variant of sample_features returning a (channels,) vector."""
    return sample_features(fmap, [u], [v], method)[0]


@dataclass(frozen=True)
class FusedPointSet:
    """Per-point fused rows grouped by voxel: decorated(7) + image feature."""

    grid: VoxelGrid
    rows: np.ndarray   # (K, T, 7 + reduced_dim)
    mask: np.ndarray   # (K, T) validity
    voxel_coords: np.ndarray  # (K, 3) integer cell indices

    @property
    def row_dim(self):
        return self.rows.shape[2]


@dataclass(frozen=True)
class FusedVoxelSet:
    """Per-voxel fused rows: VFE output + reduced ROI feature."""

    rows: np.ndarray          # (K, vfe_dim + reduced_dim)
    voxel_coords: np.ndarray  # (K, 3)

    @property
    def row_dim(self):
        return self.rows.shape[1]


def decorated_voxel_block(grid: VoxelGrid):
    """Pad per-voxel decorated points into (K, T, 7) with a validity mask.

    Also returns the per-slot original point coordinates (K, T, 3) used
    for projecting each slot back into the image.
    """
    K = len(grid.voxels)
    T = grid.cfg.max_points
    rows = np.zeros((K, T, 7), dtype=np.float64)
    xyz = np.zeros((K, T, 3), dtype=np.float64)
    mask = np.zeros((K, T), dtype=bool)
    for k, voxel in enumerate(grid.voxels):
        dec = geometry.decorate(voxel)
        n = dec.shape[0]
        rows[k, :n] = dec
        xyz[k, :n] = voxel.points[:, :3]
        mask[k, :n] = True
    return rows, xyz, mask


def point_fusion(cloud: PointCloud, calib: Calibration, fmap: FeatureMap,
                 reducer: FeatureReducer, cfg: VoxelGridConfig,
                 method="bilinear") -> FusedPointSet:
    """Fuse a reduced per-pixel feature onto every camera-visible point.

    Crops to the frustum, voxelizes, decorates, then projects each
    retained point, samples the map and appends the reduced feature.
    The reducer runs in eval mode; this is the pure inference surface.
    """
    if reducer.mode != "point" or reducer.dims != POINT_REDUCER_DIMS:
        raise ShapeMismatch("reducer is not in point-fusion configuration")
    if fmap.channels != reducer.dims[0]:
        raise ShapeMismatch(
            f"feature map has {fmap.channels} channels, reducer wants {reducer.dims[0]}")
    visible = geometry.crop_to_frustum(cloud, calib)
    if len(visible) == 0:
        raise NoVisiblePoints("no points project inside the image")
    grid = geometry.voxelize(visible, cfg)
    rows7, xyz, mask = decorated_voxel_block(grid)
    u, v, _ = geometry.project_points(xyz[mask], calib)
    feats = sample_features(fmap, u, v, method)
    reduced = reducer.forward(feats, train=False)
    K, T = mask.shape
    fused = np.zeros((K, T, 7 + reducer.out_dim), dtype=np.float64)
    fused[:, :, :7] = rows7
    fused[mask, 7:] = reduced
    coords = np.array([vox.index for vox in grid.voxels], dtype=np.int64)
    return FusedPointSet(grid=grid, rows=fused, mask=mask, voxel_coords=coords)


def roi_pooled_feature(fmap: FeatureMap, roi: geometry.Roi):
    """Average of bilinear samples on a 7x7 grid spanning the ROI."""
    if not roi.valid:
        return np.zeros(fmap.channels, dtype=np.float64)
    g = np.linspace(0.0, 1.0, ROI_POOL_GRID)
    us = roi.u_min + (roi.u_max - roi.u_min) * g
    vs = roi.v_min + (roi.v_max - roi.v_min) * g
    uu, vv = np.meshgrid(us, vs)
    samples = sample_features(fmap, uu.ravel(), vv.ravel())
    return samples.mean(axis=0)


def pooled_voxel_features(voxels, cfg: VoxelGridConfig, calib: Calibration,
                          fmap: FeatureMap):
    """(K, channels) ROI-pooled image features; invalid ROIs give zeros.

    Bilinear sampling is linear in the map values, so the 7x7 sample
    average collapses to one per-cell weight matrix and a single matrix
    product; this matches per-sample pooling to float rounding.
    """
    k = len(voxels)
    pooled = np.zeros((k, fmap.channels), dtype=np.float64)
    if k == 0:
        return pooled
    indices = np.array([v.index for v in voxels])
    u_min, v_min, u_max, v_max, valid = geometry.project_voxel_rois(
        indices, cfg, calib)
    g = np.linspace(0.0, 1.0, ROI_POOL_GRID)
    us = u_min[:, None] + (u_max - u_min)[:, None] * g            # (K, 7)
    vs = v_min[:, None] + (v_max - v_min)[:, None] * g
    uu = np.repeat(us[:, None, :], ROI_POOL_GRID, axis=1).ravel()
    vv = np.repeat(vs[:, :, None], ROI_POOL_GRID, axis=2).ravel()
    h, w = fmap.height, fmap.width
    scale = fmap.rescale / fmap.stride
    cx = np.clip(uu * scale, 0.0, w - 1.0)
    cy = np.clip(vv * scale, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    rows = np.repeat(np.arange(k), ROI_POOL_GRID * ROI_POOL_GRID)
    weights = np.zeros((k, h * w), dtype=np.float64)
    np.add.at(weights, (rows, y0 * w + x0), (1 - fx) * (1 - fy))
    np.add.at(weights, (rows, y0 * w + x1), fx * (1 - fy))
    np.add.at(weights, (rows, y1 * w + x0), (1 - fx) * fy)
    np.add.at(weights, (rows, y1 * w + x1), fx * fy)
    flat = fmap.data.reshape(fmap.channels, h * w).T.astype(np.float64)
    pooled[:] = (weights @ flat) / (ROI_POOL_GRID * ROI_POOL_GRID)
    pooled[~valid] = 0.0
    return pooled


def voxel_fusion(voxel_features, voxels, cfg: VoxelGridConfig,
                 calib: Calibration, fmap: FeatureMap,
                 reducer: FeatureReducer) -> FusedVoxelSet:
    """Append a reduced ROI-pooled image feature to each voxel's encoding."""
    if reducer.mode != "voxel" or reducer.dims != VOXEL_REDUCER_DIMS:
        raise ShapeMismatch("reducer is not in voxel-fusion configuration")
    if fmap.channels != reducer.dims[0]:
        raise ShapeMismatch(
            f"feature map has {fmap.channels} channels, reducer wants {reducer.dims[0]}")
    voxel_features = np.asarray(voxel_features)
    if voxel_features.shape[0] != len(voxels):
        raise ShapeMismatch("one feature row per voxel required")
    pooled = pooled_voxel_features(voxels, cfg, calib, fmap)
    reduced = reducer.forward(pooled, train=False)
    rows = np.hstack([voxel_features, reduced])
    coords = np.array([vox.index for vox in voxels], dtype=np.int64)
    return FusedVoxelSet(rows=rows, voxel_coords=coords)


def crop_raw_patch(image: Image, u, v, k=3):
    """Flattened channel-major k x k RGB patch centered at the rounded pixel.

    Border pixels replicate outward; values are in [0, 1].
    """
    if k % 2 != 1:
        raise ValueError("patch size must be odd")
    half = k // 2
    cu = int(np.floor(u + 0.5))
    cv = int(np.floor(v + 0.5))
    rows = np.clip(np.arange(cv - half, cv + half + 1), 0, image.height - 1)
    cols = np.clip(np.arange(cu - half, cu + half + 1), 0, image.width - 1)
    patch = image.as_float()[np.ix_(rows, cols)]       # (k, k, 3)
    return patch.transpose(2, 0, 1).ravel()


def crop_raw_patches(image: Image, us, vs, k=3):
    return np.stack([crop_raw_patch(image, u, v, k) for u, v in zip(us, vs)])


def generate_feature_map(labels, image_width, image_height,
                         channels=512, stride=8.0) -> FeatureMap:
    """Synthetic stand-in for a 2D detector's feature map.

    Channel 0 encodes normalized u of the cell center, channel 1
    normalized v, channel 2 an inside-any-2D-box indicator, channel 3 a
    per-box signature; the rest stay zero. Boxes come from the labels'
    2D rectangles (DontCare rows excluded).
    """
    if channels < 4:
        raise ValueError("generator needs at least 4 channels")
    width = int(np.floor((image_width - 1) / stride)) + 1
    height = int(np.floor((image_height - 1) / stride)) + 1
    data = np.zeros((channels, height, width), dtype=np.float32)
    u_centers = np.arange(width) * stride
    v_centers = np.arange(height) * stride
    data[0] = np.broadcast_to(u_centers / image_width, (height, width))
    data[1] = np.broadcast_to((v_centers / image_height)[:, None], (height, width))
    boxes = [obj.bbox2d for obj in labels if not obj.dont_care]
    uu, vv = np.meshgrid(u_centers, v_centers)
    for i, (left, top, right, bottom) in enumerate(boxes):
        inside = (uu >= left) & (uu <= right) & (vv >= top) & (vv <= bottom)
        data[2][inside] = 1.0
        data[3][inside] = (i + 1) / (len(boxes) + 1)
    return FeatureMap(data=data, stride=float(stride))
