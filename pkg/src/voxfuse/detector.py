"""End-to-end oriented-box detector over fused voxel features.

Pipeline per scene: voxel feature encoding (optionally with image
evidence fused at point or voxel level), a dense scatter into the 3D
grid, three 3D-conv middle layers that collapse depth, a three-block
downsample/upsample head, and two 1x1 heads emitting an objectness map
and a 7-dim residual map over a two-orientation anchor lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion, geometry, kitti_io
from .config import NetworkConfig
from .errors import (
    DivergedLoss,
    IndivisibleGrid,
    NoNegatives,
    NonPositiveSize,
    NoVisiblePoints,
    ShapeMismatch,
)
from .fusion import FeatureReducer
from .geometry import Box3D
from .kitti_io import Detection
from .neural import (
    SGD,
    Conv2d,
    Conv3d,
    Deconv2d,
    VfeLayer,
    load_checkpoint,
    name_params,
    save_checkpoint,
    zero_grads,
)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# anchors and regression targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorGrid:
    """One anchor per output BEV cell per orientation, row-major then
    orientation-minor; each row is (x, y, z, l, w, h, yaw)."""

    boxes: np.ndarray
    bev_h: int
    bev_w: int

    def __len__(self):
        return self.boxes.shape[0]


def generate_anchors(cfg: NetworkConfig) -> AnchorGrid:
    nx, ny, _ = cfg.grid_shape
    down = 2 ** len(cfg.rpn_channels)
    if nx % down or ny % down:
        raise IndivisibleGrid(
            f"BEV grid {nx}x{ny} not divisible by RPN stride {down}")
    out_w, out_h = nx // 2, ny // 2
    cell_x = (cfg.range_max[0] - cfg.range_min[0]) / out_w
    cell_y = (cfg.range_max[1] - cfg.range_min[1]) / out_h
    l, w, h = cfg.anchor_size
    yaws = cfg.anchor_yaws
    boxes = np.empty((out_h * out_w * len(yaws), 7), dtype=np.float64)
    n = 0
    for i in range(out_h):
        y = cfg.range_min[1] + (i + 0.5) * cell_y
        for j in range(out_w):
            x = cfg.range_min[0] + (j + 0.5) * cell_x
            for yaw in yaws:
                boxes[n] = (x, y, cfg.anchor_z, l, w, h, yaw)
                n += 1
    return AnchorGrid(boxes=boxes, bev_h=out_h, bev_w=out_w)


def encode_residuals(anchor, gt: Box3D) -> np.ndarray:
    """Normalized offsets of a ground-truth box relative to an anchor row."""
    a = np.asarray(anchor, dtype=np.float64)
    if a[3] <= 0 or a[4] <= 0 or a[5] <= 0:
        raise NonPositiveSize(f"anchor sizes {a[3:6]} must be positive")
    if min(gt.size) <= 0:
        raise NonPositiveSize(f"gt sizes {gt.size} must be positive")
    d = math.hypot(a[3], a[4])
    return np.array([
        (gt.center[0] - a[0]) / d,
        (gt.center[1] - a[1]) / d,
        (gt.center[2] - a[2]) / a[5],
        math.log(gt.size[0] / a[3]),
        math.log(gt.size[1] / a[4]),
        math.log(gt.size[2] / a[5]),
        gt.yaw - a[6],
    ])


MAX_LOG_SIZE_RESIDUAL = 10.0  # keeps exp() finite for untrained heads


def decode_residuals(anchor, pred) -> Box3D:
    """Inverse of encode_residuals; yaw is normalized by construction.

    Log-size residuals are clamped to +-10 so arbitrary head outputs
    cannot decode to zero or infinite boxes.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if a[3] <= 0 or a[4] <= 0 or a[5] <= 0:
        raise NonPositiveSize(f"anchor sizes {a[3:6]} must be positive")
    d = math.hypot(a[3], a[4])
    logs = np.clip(p[3:6], -MAX_LOG_SIZE_RESIDUAL, MAX_LOG_SIZE_RESIDUAL)
    return Box3D(
        center=(a[0] + p[0] * d, a[1] + p[1] * d, a[2] + p[2] * a[5]),
        size=(a[3] * math.exp(logs[0]), a[4] * math.exp(logs[1]),
              a[5] * math.exp(logs[2])),
        yaw=a[6] + p[6])


@dataclass
class Targets:
    labels: np.ndarray     # (N,) int8: 1 positive, 0 negative, -1 ignore
    residuals: np.ndarray  # (N, 7), zero rows outside positives
    assigned: np.ndarray   # (N,) matched gt index, -1 elsewhere


def _anchor_footprints(anchors: AnchorGrid) -> np.ndarray:
    b = anchors.boxes
    # anchors are axis-aligned by construction: yaw ~ pi/2 swaps extents
    swap = np.abs(np.sin(b[:, 6])) > np.abs(np.cos(b[:, 6]))
    half_x = np.where(swap, b[:, 4], b[:, 3]) / 2
    half_y = np.where(swap, b[:, 3], b[:, 4]) / 2
    return np.column_stack([b[:, 0] - half_x, b[:, 1] - half_y,
                            b[:, 0] + half_x, b[:, 1] + half_y])


def _rect_iou_matrix(a, b):
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2])
                 - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3])
                 - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 1e-12, inter / np.maximum(union, 1e-12), 0.0)


def assign_targets(anchors: AnchorGrid, gt_boxes, cfg: NetworkConfig) -> Targets:
    """Label anchors by axis-aligned BEV footprint IoU against ground truth.

    IoU >= pos threshold is positive, < neg threshold negative, the band
    between is ignored; additionally the best-IoU anchor of every ground
    truth is forced positive so no object goes unsupervised.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    residuals = np.zeros((n, 7), dtype=np.float64)
    assigned = np.full(n, -1, dtype=np.int64)
    if not gt_boxes:
        return Targets(labels, residuals, assigned)
    a_rects = _anchor_footprints(anchors)
    g_rects = np.array([geometry.box_standup_bev(g) for g in gt_boxes])
    ious = _rect_iou_matrix(a_rects, g_rects)          # (n, G)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= cfg.pos_iou] = 1
    labels[(best_iou >= cfg.neg_iou) & (best_iou < cfg.pos_iou)] = -1
    assigned[labels == 1] = best_gt[labels == 1]
    for g in range(len(gt_boxes)):                      # argmax rule
        a = int(ious[:, g].argmax())
        labels[a] = 1
        assigned[a] = g
    pos = np.flatnonzero(labels == 1)
    for a in pos:
        residuals[a] = encode_residuals(anchors.boxes[a], gt_boxes[assigned[a]])
    return Targets(labels, residuals, assigned)


# ---------------------------------------------------------------------------
# scene preparation
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Static per-scene inputs; image features are re-sampled per step."""

    frame: str
    rows7: np.ndarray            # (K, T, 7) decorated points
    mask: np.ndarray             # (K, T)
    coords: np.ndarray           # (K, 3) cell indices
    uv: np.ndarray | None        # (M, 2) pixel projections of unmasked slots
    fmap: kitti_io.FeatureMap | None
    patches: np.ndarray | None   # (M, 3k^2) raw pixel patches
    voxel_pooled: np.ndarray | None  # (K, C) ROI-pooled image features
    targets: Targets | None
    gt_boxes: list | None
    n_points: int

    @property
    def n_voxels(self):
        return self.rows7.shape[0]


def prepare_scene(cfg: NetworkConfig, cloud, calib, fmap=None, image=None,
                  gt_boxes=None, anchors=None, frame="scene") -> Scene:
    mode = cfg.fusion_mode
    if mode in ("pointfusion", "voxelfusion") and fmap is None:
        raise ShapeMismatch(f"{mode} needs a feature map")
    if cfg.patch_k and image is None:
        raise ShapeMismatch(f"{mode} needs an image")
    cropped = geometry.crop_to_frustum(cloud, calib) if cfg.crops_to_frustum \
        else cloud
    if len(cropped) == 0 and mode != "lidar":
        raise NoVisiblePoints(f"{frame}: no points visible to the camera")
    grid = geometry.voxelize(cropped, cfg.voxel_cfg())
    rows7, xyz, mask = fusion.decorated_voxel_block(grid)
    coords = np.array([v.index for v in grid.voxels], dtype=np.int64).reshape(-1, 3)
    uv = None
    patches = None
    pooled = None
    if mode in ("pointfusion", "rawpatch3", "rawpatch5") and mask.any():
        u, v, _ = geometry.project_points(xyz[mask], calib)
        uv = np.column_stack([u, v])
        if cfg.patch_k:
            patches = fusion.crop_raw_patches(image, u, v, cfg.patch_k)
    if mode == "voxelfusion":
        pooled = fusion.pooled_voxel_features(grid.voxels, cfg.voxel_cfg(),
                                              calib, fmap)
    targets = assign_targets(anchors, gt_boxes, cfg) \
        if anchors is not None and gt_boxes is not None else None
    return Scene(frame=frame, rows7=rows7.astype(np.float32), mask=mask,
                 coords=coords, uv=uv,
                 fmap=fmap if mode in ("pointfusion", "voxelfusion") else None,
                 patches=patches, voxel_pooled=pooled, targets=targets,
                 gt_boxes=gt_boxes, n_points=len(cropped))


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class DetectionNet:
    """Hand-wired forward/backward graph, parameterized by fusion mode."""

    def __init__(self, cfg: NetworkConfig, dtype=np.float32, reducer_dims=None):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        mode = cfg.fusion_mode
        self.reducer = None
        tail = 0
        if mode == "pointfusion":
            dims = tuple(reducer_dims) if reducer_dims else fusion.POINT_REDUCER_DIMS
            self.reducer = FeatureReducer(dims, rng, dtype, mode="point")
            tail = dims[2]
        elif mode == "voxelfusion":
            dims = tuple(reducer_dims) if reducer_dims else fusion.VOXEL_REDUCER_DIMS
            self.reducer = FeatureReducer(dims, rng, dtype, mode="voxel")
        elif cfg.patch_k:
            tail = 3 * cfg.patch_k * cfg.patch_k
        self.vfe_in = 7 + tail

        self.vfe_layers = []
        prev = self.vfe_in
        for c_out in cfg.vfe_out:
            if c_out % 2:
                raise ShapeMismatch(f"VFE output dim {c_out} must be even")
            self.vfe_layers.append(VfeLayer(prev, c_out // 2, rng, dtype))
            prev = c_out
        self.voxel_dim = prev + (self.reducer.out_dim
                                 if mode == "voxelfusion" else 0)

        nx, ny, nz = cfg.grid_shape
        self.middle = []
        in_ch, depth = self.voxel_dim, nz
        for ch, stride, pad in zip(cfg.middle_channels, cfg.middle_strides,
                                   cfg.middle_pads):
            conv = Conv3d(in_ch, ch, 3, rng, stride=stride, pad=pad, dtype=dtype)
            depth = conv.out_shape((depth, ny, nx))[0]
            self.middle.append(conv)
            in_ch = ch
        if depth < 1:
            raise ShapeMismatch("middle layers collapse depth below 1")
        self.rpn_in = in_ch * depth
        self._mid_depth = depth

        self.blocks = []
        prev = self.rpn_in
        for ch in cfg.rpn_channels:
            block = [Conv2d(prev, ch, 3, rng, stride=2, pad=1, dtype=dtype)]
            for _ in range(cfg.rpn_convs_per_block - 1):
                block.append(Conv2d(ch, ch, 3, rng, stride=1, pad=1, dtype=dtype))
            self.blocks.append(block)
            prev = ch
        self.deconvs = []
        for i, ch in enumerate(cfg.rpn_channels):
            if i == 0:
                deconv = Deconv2d(ch, cfg.rpn_deconv_channels, 3, rng,
                                  stride=1, pad=1, dtype=dtype)
            else:
                k = 2 ** i
                deconv = Deconv2d(ch, cfg.rpn_deconv_channels, k, rng,
                                  stride=k, pad=0, dtype=dtype)
            self.deconvs.append(deconv)
        cat_ch = cfg.rpn_deconv_channels * len(cfg.rpn_channels)
        self.head_score = Conv2d(cat_ch, 2, 1, rng, with_bn=False,
                                 with_relu=False, dtype=dtype)
        self.head_reg = Conv2d(cat_ch, 14, 1, rng, with_bn=False,
                               with_relu=False, dtype=dtype)

        self.anchors = generate_anchors(cfg)
        self._params = self._collect_params()
        self._cache = None

    def _collect_params(self):
        params = []
        if self.reducer is not None:
            for i, layer in enumerate(self.reducer.layers):
                params += name_params(layer.params(), f"reducer.{i}")
        for i, vfe in enumerate(self.vfe_layers):
            params += name_params(vfe.params(), f"vfe.{i}")
        for i, conv in enumerate(self.middle):
            params += name_params(conv.params(), f"middle.{i}")
        for i, block in enumerate(self.blocks):
            for j, conv in enumerate(block):
                params += name_params(conv.params(), f"rpn.{i}.{j}")
        for i, deconv in enumerate(self.deconvs):
            params += name_params(deconv.params(), f"up.{i}")
        params += name_params(self.head_score.params(), "head.score")
        params += name_params(self.head_reg.params(), "head.reg")
        return params

    def parameters(self):
        return self._params

    def _image_tail(self, scene: Scene, train):
        """(M, tail) image evidence per unmasked slot, or None."""
        mode = self.cfg.fusion_mode
        if mode == "pointfusion":
            feats = fusion.sample_features(scene.fmap, scene.uv[:, 0],
                                           scene.uv[:, 1], self.cfg.sampling)
            return self.reducer.forward(feats.astype(self.dtype), train)
        if self.cfg.patch_k:
            return scene.patches.astype(self.dtype)
        return None

    def encode_voxels(self, scene: Scene, train):
        """(K, voxel_dim) features from the VFE stack, image half included.

        The per-voxel vector is the element-wise max over the last VFE
        layer's concatenated point features, which equals its pooled
        summary tiled twice; voxel-level fusion appends the reduced
        ROI feature.
        """
        K, T = scene.mask.shape
        if K == 0:
            return None
        rows = scene.rows7.astype(self.dtype)
        tail = self._image_tail(scene, train)
        if tail is not None:
            full = np.zeros((K, T, self.vfe_in), dtype=self.dtype)
            full[:, :, :7] = rows
            full[scene.mask, 7:] = tail
            rows = full
        x = rows
        summary = None
        for vfe in self.vfe_layers:
            x, summary = vfe.forward(x, scene.mask, train)
        voxel_feat = np.concatenate([summary, summary], axis=1)
        if self.cfg.fusion_mode == "voxelfusion":
            reduced = self.reducer.forward(
                scene.voxel_pooled.astype(self.dtype), train)
            voxel_feat = np.concatenate([voxel_feat, reduced], axis=1)
        return voxel_feat

    def forward(self, scene: Scene, train):
        cfg = self.cfg
        nx, ny, nz = cfg.grid_shape
        K, T = scene.mask.shape
        voxel_feat = self.encode_voxels(scene, train)
        dense = np.zeros((1, self.voxel_dim, nz, ny, nx), dtype=self.dtype)
        if K > 0:
            dense[0][:, scene.coords[:, 2], scene.coords[:, 1],
                     scene.coords[:, 0]] = voxel_feat.T
        x3 = dense
        for conv in self.middle:
            x3 = conv.forward(x3, train)
        _, c, d, h, w = x3.shape
        x2 = x3.reshape(1, c * d, h, w)
        block_outs = []
        x = x2
        for block in self.blocks:
            for conv in block:
                x = conv.forward(x, train)
            block_outs.append(x)
        ups = [deconv.forward(out, train)
               for deconv, out in zip(self.deconvs, block_outs)]
        cat = np.concatenate(ups, axis=1)
        logits = self.head_score.forward(cat, train)
        reg = self.head_reg.forward(cat, train)
        h2, w2 = logits.shape[2], logits.shape[3]
        self._cache = (scene, K, (c, d, h, w), [u.shape[1] for u in ups])
        out_logits = logits[0].transpose(1, 2, 0)
        out_reg = reg[0].transpose(1, 2, 0).reshape(h2, w2, 2, 7)
        return out_logits, out_reg

    def backward(self, d_logits, d_reg):
        scene, K, mid_shape, up_channels = self._cache
        h2, w2 = d_logits.shape[0], d_logits.shape[1]
        d_score = d_logits.transpose(2, 0, 1)[None].astype(self.dtype)
        d_regmap = d_reg.reshape(h2, w2, 14).transpose(2, 0, 1)[None] \
            .astype(self.dtype)
        d_cat = self.head_score.backward(d_score) \
            + self.head_reg.backward(d_regmap)
        d_block_out = []
        offset = 0
        for deconv, ch in zip(self.deconvs, up_channels):
            d_block_out.append(deconv.backward(d_cat[:, offset:offset + ch]))
            offset += ch
        d_next = None
        for i in range(len(self.blocks) - 1, -1, -1):
            d = d_block_out[i] if d_next is None else d_block_out[i] + d_next
            for conv in reversed(self.blocks[i]):
                d = conv.backward(d)
            d_next = d
        c, d_depth, h, w = mid_shape
        d3 = d_next.reshape(1, c, d_depth, h, w)
        for conv in reversed(self.middle):
            d3 = conv.backward(d3)
        if K == 0:
            return
        d_voxel = d3[0][:, scene.coords[:, 2], scene.coords[:, 1],
                        scene.coords[:, 0]].T
        if self.cfg.fusion_mode == "voxelfusion":
            split = self.voxel_dim - self.reducer.out_dim
            self.reducer.backward(d_voxel[:, split:])
            d_voxel = d_voxel[:, :split]
        half = d_voxel.shape[1] // 2
        d_summary = d_voxel[:, :half] + d_voxel[:, half:]
        d_pointwise = None
        for vfe in reversed(self.vfe_layers):
            d_rows = vfe.backward(d_pointwise, d_summary)
            d_pointwise, d_summary = d_rows, None
        if self.cfg.fusion_mode == "pointfusion":
            self.reducer.backward(d_rows[:, :, 7:][scene.mask])

    def save(self, directory):
        save_checkpoint(directory, self._params)

    def load(self, directory):
        load_checkpoint(directory, self._params)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def compute_loss(logits, reg, targets: Targets, cfg: NetworkConfig):
    """Weighted objectness BCE plus smooth-L1 residual regression.

    Returns (loss, d_logits, d_reg). Positive terms vanish when a scene
    has no positive anchors; a scene with no negatives is degenerate.
    """
    flat_x = logits.reshape(-1).astype(np.float64)
    flat_reg = reg.reshape(-1, 7).astype(np.float64)
    labels = targets.labels
    if flat_x.shape[0] != labels.shape[0]:
        raise ShapeMismatch(
            f"{flat_x.shape[0]} predictions vs {labels.shape[0]} anchors")
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise NoNegatives("scene has no negative anchors")
    d_logits = np.zeros_like(flat_x)
    d_reg = np.zeros_like(flat_reg)
    sig = _sigmoid(flat_x)
    loss = cfg.loss_beta * float(np.logaddexp(0.0, flat_x[neg]).mean())
    d_logits[neg] = cfg.loss_beta * sig[neg] / n_neg
    if n_pos:
        loss += cfg.loss_alpha * float(np.logaddexp(0.0, -flat_x[pos]).mean())
        d_logits[pos] = cfg.loss_alpha * (sig[pos] - 1.0) / n_pos
        diff = flat_reg[pos] - targets.residuals[pos]
        absd = np.abs(diff)
        smooth = np.where(absd < 1.0, 0.5 * diff * diff, absd - 0.5)
        loss += cfg.loss_lambda * float(smooth.sum(axis=1).mean())
        d_reg[pos] = cfg.loss_lambda * np.where(absd < 1.0, diff,
                                                np.sign(diff)) / n_pos
    return (loss, d_logits.reshape(logits.shape), d_reg.reshape(reg.shape))


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


# ---------------------------------------------------------------------------
# inference and training
# ---------------------------------------------------------------------------

def infer(net: DetectionNet, scene: Scene) -> list[Detection]:
    """Decode, threshold, and suppress; detections sorted by falling score."""
    cfg = net.cfg
    logits, reg = net.forward(scene, train=False)
    probs = _sigmoid(logits.reshape(-1).astype(np.float64))
    flat_reg = reg.reshape(-1, 7)
    keep = np.flatnonzero(probs >= cfg.score_threshold)
    if keep.size == 0:
        return []
    if keep.size > cfg.pre_nms_top_k:
        order = np.argsort(-probs[keep], kind="stable")[:cfg.pre_nms_top_k]
        keep = keep[order]
    boxes = [decode_residuals(net.anchors.boxes[i], flat_reg[i]) for i in keep]
    scores = probs[keep]
    kept = geometry.nms_bev(boxes, scores, cfg.nms_iou)
    kept = kept[:cfg.max_detections]
    return [Detection(box=boxes[i], score=float(scores[i])) for i in kept]


def train(net: DetectionNet, scenes, out_dir=None, shuffle_seed=None,
          log_fn=None):
    """SGD over per-scene steps; returns the per-epoch mean loss curve."""
    if not scenes:
        raise ValueError("training needs a non-empty dataset")
    cfg = net.cfg
    sched = cfg.schedule
    opt = SGD(sched.lr, sched.momentum)
    rng = np.random.default_rng(cfg.seed if shuffle_seed is None else shuffle_seed)
    params = net.parameters()
    curve = []
    for epoch in range(sched.epochs):
        opt.lr = sched.lr_at(epoch)
        total = 0.0
        for idx in rng.permutation(len(scenes)):
            scene = scenes[idx]
            zero_grads(params)
            logits, reg = net.forward(scene, train=True)
            loss, d_logits, d_reg = compute_loss(logits, reg, scene.targets, cfg)
            if not math.isfinite(loss):
                raise DivergedLoss(
                    f"non-finite loss at epoch {epoch} scene {scene.frame!r}")
            net.backward(d_logits, d_reg)
            opt.step(params)
            total += loss
        curve.append(total / len(scenes))
        if log_fn:
            log_fn(epoch, curve[-1])
        if out_dir and sched.checkpoint_every \
                and (epoch + 1) % sched.checkpoint_every == 0:
            net.save(Path(out_dir) / f"epoch{epoch + 1:04d}")
    if out_dir:
        net.save(Path(out_dir) / "final")
    return curve


# ---------------------------------------------------------------------------
# dataset glue (KITTI directory layout)
# ---------------------------------------------------------------------------

def list_frames(root, split=None):
    root = Path(root)
    if split is not None:
        split_file = root / "ImageSets" / f"{split}.txt"
        return [line.strip() for line in split_file.read_text().splitlines()
                if line.strip()]
    return sorted(p.stem for p in (root / "velodyne").glob("*.bin"))


def load_scene(cfg: NetworkConfig, root, frame, anchors=None,
               with_targets=True) -> Scene:
    """Read one frame from a KITTI-layout directory and prepare it."""
    root = Path(root)
    cloud = kitti_io.read_point_cloud(root / "velodyne" / f"{frame}.bin")
    image = None
    image_path = root / "image_2" / f"{frame}.ppm"
    if image_path.exists():
        image = kitti_io.read_image(image_path)
    calib = kitti_io.read_calibration(
        root / "calib" / f"{frame}.txt",
        image_width=image.width if image else kitti_io.DEFAULT_IMAGE_WIDTH,
        image_height=image.height if image else kitti_io.DEFAULT_IMAGE_HEIGHT)
    fmap = None
    if cfg.fusion_mode in ("pointfusion", "voxelfusion"):
        fmap = kitti_io.read_tensor(root / "features" / f"{frame}.npy")
    gt_boxes = None
    label_path = root / "label_2" / f"{frame}.txt"
    if with_targets and label_path.exists():
        labels = kitti_io.read_labels(label_path)
        gt_boxes = [geometry.camera_label_to_lidar_box(obj, calib)
                    for obj in labels if not obj.dont_care]
    return prepare_scene(cfg, cloud, calib, fmap=fmap, image=image,
                         gt_boxes=gt_boxes, anchors=anchors, frame=frame)


def load_dataset(cfg: NetworkConfig, root, split, anchors=None,
                 with_targets=True):
    return [load_scene(cfg, root, frame, anchors, with_targets)
            for frame in list_frames(root, split)]
