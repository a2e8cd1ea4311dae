import math

import numpy as np
import pytest

from voxfuse import detector, geometry
from voxfuse.config import NetworkConfig, Schedule, toy_config
from voxfuse.detector import (
    DetectionNet,
    Targets,
    assign_targets,
    compute_loss,
    decode_residuals,
    encode_residuals,
    generate_anchors,
    infer,
    prepare_scene,
    train,
)
from voxfuse.errors import (
    DivergedLoss,
    IndivisibleGrid,
    NoNegatives,
    NonPositiveSize,
)
from voxfuse.geometry import Box3D
from voxfuse.kitti_io import FeatureMap, Image, PointCloud
from voxfuse.neural import gradient_check, zero_grads

from conftest import toy_calib, toy_cloud

D_A = math.hypot(3.9, 1.6)


def grid8_config(**kw):
    # 8x8x2 BEV grid -> 4x4 anchor lattice
    return NetworkConfig(range_min=(0, -3.2, -3), range_max=(6.4, 3.2, 1),
                         voxel_size=(0.8, 0.8, 2.0), **kw)


def tiny_config(mode, **kw):
    """Smallest config that exercises every layer type."""
    # two RPN blocks: a third would leave batch norm a single spatial row
    return NetworkConfig(
        fusion_mode=mode,
        range_min=(0, -3.2, -3), range_max=(6.4, 3.2, 1),
        voxel_size=(0.8, 0.8, 2.0), max_points_per_voxel=6,
        vfe_out=(8, 8) if mode == "voxelfusion" else (8, 16),
        middle_channels=(6, 6, 6), rpn_channels=(6, 6),
        rpn_deconv_channels=4, image_channels=6, feature_stride=8.0,
        **kw)


class TestAnchors:
    def test_count(self):
        anchors = generate_anchors(grid8_config())
        assert len(anchors) == 4 * 4 * 2
        assert (anchors.bev_h, anchors.bev_w) == (4, 4)

    def test_first_center_is_half_cell(self):
        cfg = grid8_config()
        anchors = generate_anchors(cfg)
        # output cell is 6.4 / 4 = 1.6 m
        np.testing.assert_allclose(anchors.boxes[0][:3], (0.8, -2.4, -1.0))

    def test_orientations_alternate(self):
        anchors = generate_anchors(grid8_config())
        yaws = anchors.boxes[:, 6]
        np.testing.assert_allclose(yaws[0::2], 0.0)
        np.testing.assert_allclose(yaws[1::2], math.pi / 2)

    def test_indivisible_grid_rejected(self):
        cfg = NetworkConfig(range_min=(0, -3, -3), range_max=(6, 3, 1),
                            voxel_size=(0.5, 0.5, 2.0))  # 12x12 grid
        with pytest.raises(IndivisibleGrid):
            generate_anchors(cfg)


class TestAssignTargets:
    def test_exact_match_positive_zero_residuals(self):
        cfg = grid8_config()
        anchors = generate_anchors(cfg)
        gt = Box3D(tuple(anchors.boxes[0][:3]), (3.9, 1.6, 1.56), 0.0)
        targets = assign_targets(anchors, [gt], cfg)
        assert targets.labels[0] == 1
        np.testing.assert_allclose(targets.residuals[0], 0.0, atol=1e-12)

    def test_no_gt_all_negative(self):
        cfg = grid8_config()
        targets = assign_targets(generate_anchors(cfg), [], cfg)
        assert (targets.labels == 0).all()

    def test_unit_normalized_offset(self):
        cfg = grid8_config()
        anchors = generate_anchors(cfg)
        base = anchors.boxes[0]
        gt = Box3D((base[0] + D_A, base[1], base[2]), (3.9, 1.6, 1.56), 0.0)
        res = encode_residuals(base, gt)
        assert res[0] == pytest.approx(1.0)
        assert res[1:].tolist() == pytest.approx([0.0] * 6)

    def test_partition_and_argmax_rule(self, rng):
        cfg = grid8_config()
        anchors = generate_anchors(cfg)
        # separated objects so no two share their best anchor
        gts = [Box3D(center, (3.9, 1.6, 1.56), rng.uniform(-math.pi, math.pi))
               for center in ((1.5, -2.2, -1.0), (3.2, 2.0, -1.0),
                              (5.5, -0.8, -1.0))]
        targets = assign_targets(anchors, gts, cfg)
        assert set(np.unique(targets.labels)) <= {-1, 0, 1}
        # every gt has at least one positive anchor
        matched = set(targets.assigned[targets.labels == 1])
        assert matched == {0, 1, 2}
        # residuals only where positive
        assert (targets.residuals[targets.labels != 1] == 0).all()


class TestEncodeDecode:
    def test_zero_prediction_decodes_to_anchor(self):
        anchor = np.array([5.0, 1.0, -1.0, 3.9, 1.6, 1.56, 0.0])
        box = decode_residuals(anchor, np.zeros(7))
        np.testing.assert_allclose(box.center, anchor[:3])
        np.testing.assert_allclose(box.size, anchor[3:6])
        assert box.yaw == 0.0

    def test_log_size_encoding(self):
        anchor = np.array([5.0, 1.0, -1.0, 3.9, 1.6, 1.56, 0.0])
        pred = np.zeros(7)
        pred[3] = math.log(2.0)
        assert decode_residuals(anchor, pred).size[0] == pytest.approx(7.8)

    def test_round_trip_100_random(self, rng):
        for _ in range(100):
            anchor = np.array([rng.uniform(0, 10), rng.uniform(-5, 5),
                               rng.uniform(-2, 0), rng.uniform(2, 5),
                               rng.uniform(1, 2.5), rng.uniform(1, 2),
                               rng.choice([0.0, math.pi / 2])])
            gt = Box3D((rng.uniform(0, 10), rng.uniform(-5, 5), rng.uniform(-2, 0)),
                       tuple(rng.uniform(0.5, 5, 3)),
                       rng.uniform(-math.pi, math.pi))
            back = decode_residuals(anchor, encode_residuals(anchor, gt))
            np.testing.assert_allclose(back.center, gt.center, atol=1e-9)
            np.testing.assert_allclose(back.size, gt.size, atol=1e-9)
            assert abs(geometry.normalize_angle(back.yaw - gt.yaw)) < 1e-9

    def test_nonpositive_anchor_rejected(self):
        with pytest.raises(NonPositiveSize):
            decode_residuals(np.array([0, 0, 0, 0.0, 1, 1, 0]), np.zeros(7))


class TestComputeLoss:
    def _setup(self):
        cfg = grid8_config()
        anchors = generate_anchors(cfg)
        gt = Box3D(tuple(anchors.boxes[10][:3]), (3.9, 1.6, 1.56), 0.0)
        targets = assign_targets(anchors, [gt], cfg)
        return cfg, anchors, targets

    def test_smooth_l1_values(self):
        assert detector.smooth_l1(0.5) == pytest.approx(0.125)
        assert detector.smooth_l1(2.0) == pytest.approx(1.5)

    def test_perfect_predictions_drive_loss_to_zero(self):
        cfg, anchors, targets = self._setup()
        logits = np.where(targets.labels.reshape(4, 4, 2) == 1, 40.0, -40.0)
        reg = targets.residuals.reshape(4, 4, 2, 7)
        loss, d_logits, d_reg = compute_loss(logits, reg, targets, cfg)
        assert loss < 1e-12
        assert np.abs(d_reg).max() == 0.0

    def test_no_negatives_raises(self):
        cfg, anchors, targets = self._setup()
        targets.labels[:] = 1
        with pytest.raises(NoNegatives):
            compute_loss(np.zeros((4, 4, 2)), np.zeros((4, 4, 2, 7)),
                         targets, cfg)

    def test_loss_gradients_match_finite_differences(self, rng):
        cfg, anchors, targets = self._setup()
        logits = rng.standard_normal((4, 4, 2))
        reg = rng.standard_normal((4, 4, 2, 7)) * 0.5
        loss, d_logits, d_reg = compute_loss(logits, reg, targets, cfg)
        h = 1e-6
        for arr, grad in ((logits, d_logits), (reg, d_reg)):
            flat = arr.reshape(-1)
            for c in rng.choice(flat.size, 12, replace=False):
                orig = flat[c]
                flat[c] = orig + h
                lp = compute_loss(logits, reg, targets, cfg)[0]
                flat[c] = orig - h
                lm = compute_loss(logits, reg, targets, cfg)[0]
                flat[c] = orig
                num = (lp - lm) / (2 * h)
                assert abs(num - grad.reshape(-1)[c]) < 1e-5


def build_scene(mode, seed=0, n_gt=2, cfg=None, dtype=np.float32):
    rng = np.random.default_rng(seed)
    cfg = cfg or tiny_config(mode)
    calib = toy_calib()
    cloud = PointCloud(toy_cloud(rng, n=120, x=(2.5, 5.8), y=(-1.8, 1.8)))
    gts = [Box3D((rng.uniform(2.8, 5.2), rng.uniform(-1.5, 1.5), -1.0),
                 (3.9, 1.6, 1.56), rng.uniform(-math.pi, math.pi))
           for _ in range(n_gt)]
    fmap = None
    if mode in ("pointfusion", "voxelfusion"):
        fmap = FeatureMap(data=rng.random(
            (cfg.image_channels, 12, 16)).astype(np.float32), stride=8.0)
    image = None
    if cfg.patch_k:
        image = Image((rng.random((96, 128, 3)) * 255).astype(np.uint8))
    net = DetectionNet(cfg, dtype=dtype,
                       reducer_dims=(cfg.image_channels, 8, 4)
                       if mode in ("pointfusion", "voxelfusion") else None)
    scene = prepare_scene(cfg, cloud, calib, fmap=fmap, image=image,
                          gt_boxes=gts, anchors=net.anchors)
    return net, scene, cfg


class TestForward:
    def test_output_dims_are_half_grid(self):
        net, scene, cfg = build_scene("lidar")
        logits, reg = net.forward(scene, train=False)
        nx, ny, _ = cfg.grid_shape
        assert logits.shape == (ny // 2, nx // 2, 2)
        assert reg.shape == (ny // 2, nx // 2, 2, 7)

    def test_empty_scene_gives_head_bias_map(self):
        cfg = tiny_config("lidar")
        net = DetectionNet(cfg)
        net.head_score.bias.value[:] = [0.7, -0.4]
        empty = prepare_scene(cfg, PointCloud(np.zeros((0, 4), np.float32)),
                              toy_calib(), gt_boxes=[], anchors=net.anchors)
        logits, _ = net.forward(empty, train=False)
        np.testing.assert_allclose(logits[:, :, 0], 0.7, atol=1e-6)
        np.testing.assert_allclose(logits[:, :, 1], -0.4, atol=1e-6)

    def test_voxel_order_permutation_invariance(self, rng):
        net, scene, cfg = build_scene("lidar", seed=3)
        logits_a, reg_a = net.forward(scene, train=False)
        perm = rng.permutation(scene.n_voxels)
        shuffled = detector.Scene(
            frame=scene.frame, rows7=scene.rows7[perm], mask=scene.mask[perm],
            coords=scene.coords[perm], uv=None, fmap=None, patches=None,
            voxel_pooled=None, targets=scene.targets, gt_boxes=scene.gt_boxes,
            n_points=scene.n_points)
        logits_b, reg_b = net.forward(shuffled, train=False)
        assert logits_a.tobytes() == logits_b.tobytes()
        assert reg_a.tobytes() == reg_b.tobytes()

    def test_matches_pure_point_fusion_rows(self):
        # the net's internal fusion path equals the public pure op (eval mode)
        import voxfuse.fusion as fusion_mod
        rng = np.random.default_rng(5)
        cfg = toy_config("pointfusion")
        calib = toy_calib()
        cloud = PointCloud(toy_cloud(rng, n=150))
        fmap = FeatureMap(data=rng.random((512, 12, 16)).astype(np.float32),
                          stride=8.0)
        net = DetectionNet(cfg)
        scene = prepare_scene(cfg, cloud, calib, fmap=fmap, gt_boxes=[],
                              anchors=net.anchors)
        tail = net._image_tail(scene, train=False)
        fused = fusion_mod.point_fusion(cloud, calib, fmap, net.reducer,
                                        cfg.voxel_cfg())
        np.testing.assert_allclose(tail, fused.rows[fused.mask][:, 7:],
                                   atol=1e-5)
        np.testing.assert_array_equal(scene.mask, fused.mask)


class TestEndToEndGradients:
    @pytest.mark.parametrize("mode", ["lidar", "pointfusion", "voxelfusion",
                                      "rawpatch3"])
    def test_full_loss_gradient_check(self, mode):
        net, scene, cfg = build_scene(mode, seed=11, dtype=np.float64)
        params = net.parameters()

        def f():
            zero_grads(params)
            logits, reg = net.forward(scene, train=True)
            loss, d_logits, d_reg = compute_loss(logits, reg, scene.targets, cfg)
            net.backward(d_logits, d_reg)
            return loss

        err = gradient_check(f, params, coords_per_param=3,
                             rng=np.random.default_rng(0))
        assert err < 1e-4, f"{mode}: max rel err {err}"


class TestInfer:
    def test_all_below_threshold_empty(self):
        net, scene, cfg = build_scene("lidar")
        net.head_score.kernels.value[:] = 0.0
        net.head_score.bias.value[:] = -5.0  # sigmoid ~ 0.007
        assert infer(net, scene) == []

    def test_single_anchor_above_threshold(self):
        net, scene, cfg = build_scene("lidar")
        logits = np.full((4, 4, 2), -9.0)
        logits[2, 1, 0] = 2.0
        reg = np.zeros((4, 4, 2, 7))
        reg[2, 1, 0, 3] = math.log(1.5)
        net.forward_real = net.forward
        net.forward = lambda scene, train: (logits, reg)
        dets = infer(net, scene)
        assert len(dets) == 1
        anchor = net.anchors.boxes[(2 * 4 + 1) * 2]
        assert dets[0].score == pytest.approx(1 / (1 + math.exp(-2.0)))
        assert dets[0].box.size[0] == pytest.approx(anchor[3] * 1.5)
        np.testing.assert_allclose(dets[0].box.center, anchor[:3])

    def test_nms_and_ordering_invariants(self):
        net, scene, cfg = build_scene("lidar", seed=7)
        net.head_score.bias.value[:] = 1.0  # plenty of candidates
        dets = infer(net, scene)
        assert len(dets) > 0
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        assert all(s >= cfg.score_threshold for s in scores)
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                assert geometry.bev_iou(dets[i].box, dets[j].box) < cfg.nms_iou


class TestTrain:
    def test_lr_schedule(self):
        sched = Schedule(lr=0.01, epochs=30, decay_epoch=20, decay_factor=0.1)
        assert sched.lr_at(0) == 0.01
        assert sched.lr_at(19) == 0.01
        assert sched.lr_at(20) == pytest.approx(0.001)

    def test_identical_seeds_identical_curves(self):
        curves = []
        for _ in range(2):
            net, scene, cfg = build_scene("lidar", seed=2)
            cfg.schedule.epochs = 3
            curves.append(train(net, [scene]))
        np.testing.assert_allclose(curves[0], curves[1], atol=1e-6)

    def test_diverged_loss_raises(self):
        net, scene, cfg = build_scene("lidar", seed=2)
        cfg.schedule.epochs = 1
        net.parameters()[0].value[...] = np.nan
        with pytest.raises(DivergedLoss):
            train(net, [scene])

    def test_checkpoint_written(self, tmp_path):
        net, scene, cfg = build_scene("lidar", seed=2)
        cfg.schedule.epochs = 2
        cfg.schedule.checkpoint_every = 1
        train(net, [scene], out_dir=tmp_path)
        assert (tmp_path / "epoch0001" / "manifest.txt").exists()
        assert (tmp_path / "final" / "manifest.txt").exists()
        restored = DetectionNet(cfg)
        restored.load(tmp_path / "final")
        a = net.parameters()[3].value
        b = restored.parameters()[3].value
        np.testing.assert_array_equal(a, b)
