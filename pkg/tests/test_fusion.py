import numpy as np
import pytest

from voxfuse import fusion, geometry
from voxfuse.errors import NoVisiblePoints, ShapeMismatch
from voxfuse.fusion import (
    FeatureReducer,
    crop_raw_patch,
    generate_feature_map,
    point_fusion,
    roi_pooled_feature,
    sample_feature,
    sample_features,
    voxel_fusion,
)
from voxfuse.geometry import Roi, VoxelGridConfig, voxelize
from voxfuse.kitti_io import FeatureMap, GroundTruthObject, Image, PointCloud

from conftest import identity_calib


def small_map(data, stride=1.0):
    return FeatureMap(data=np.asarray(data, dtype=np.float32), stride=stride)


CFG = VoxelGridConfig(range_min=(0, -8, -2), range_max=(16, 8, 2),
                      voxel_size=(0.5, 0.5, 1.0), max_points=8)


def zero_reducer(mode):
    rng = np.random.default_rng(0)
    reducer = (FeatureReducer.for_point_fusion(rng) if mode == "point"
               else FeatureReducer.for_voxel_fusion(rng))
    for layer in reducer.layers:
        layer.linear.W.value[:] = 0.0
    return reducer


class TestSampleFeature:
    def test_bilinear_midpoint(self):
        fmap = small_map([[[0, 1], [2, 3]]])
        assert sample_feature(fmap, 0.5, 0.5)[0] == pytest.approx(1.5)

    def test_cell_center_exact(self):
        fmap = small_map([[[0, 1], [2, 3]]])
        assert sample_feature(fmap, 1.0, 1.0)[0] == pytest.approx(3.0)

    def test_clamps_to_border(self):
        fmap = small_map([[[0, 1], [2, 3]]])
        assert sample_feature(fmap, -10.0, -10.0)[0] == pytest.approx(0.0)
        assert sample_feature(fmap, 99.0, 99.0)[0] == pytest.approx(3.0)

    def test_stride_scales_coordinates(self):
        fmap = small_map([[[0, 1], [2, 3]]], stride=16.0)
        assert sample_feature(fmap, 16.0, 0.0)[0] == pytest.approx(1.0)

    def test_nearest_mode(self):
        fmap = small_map([[[0, 1], [2, 3]]])
        assert sample_feature(fmap, 0.6, 0.4, method="nearest")[0] == pytest.approx(1.0)

    def test_rescale_factor(self):
        # original pixel u=32 with rescale 0.5 and stride 16 lands on cell 1
        fmap = FeatureMap(data=np.arange(4, dtype=np.float32).reshape(1, 2, 2),
                          stride=16.0, rescale=0.5)
        assert sample_feature(fmap, 32.0, 0.0)[0] == pytest.approx(1.0)


class TestPointFusion:
    def _scene(self):
        calib = identity_calib(width=100, height=100, focal=50, cx=50, cy=50)
        pts = PointCloud(np.array([[0.0, 0.0, 5.0, 0.2],
                                   [0.5, 0.5, 5.0, 0.4],
                                   [-0.5, -0.5, 5.0, 0.6]], dtype=np.float32))
        return calib, pts

    def test_no_visible_points(self):
        calib, _ = self._scene()
        pts = PointCloud(np.array([[0, 0, -5, 0.1]], dtype=np.float32))
        reducer = zero_reducer("point")
        fmap = small_map(np.zeros((512, 4, 4)))
        with pytest.raises(NoVisiblePoints):
            point_fusion(pts, calib, fmap, reducer, CFG)

    def test_zero_map_zero_weights_gives_zero_tail(self):
        calib, pts = self._scene()
        reducer = zero_reducer("point")
        fmap = small_map(np.zeros((512, 8, 8)), stride=16.0)
        fused = point_fusion(pts, calib, fmap, reducer, CFG)
        assert fused.rows.shape[2] == 23
        np.testing.assert_array_equal(fused.rows[fused.mask][:, 7:], 0.0)

    def test_tail_tracks_projected_u(self, rng):
        calib, pts = self._scene()
        reducer = FeatureReducer.for_point_fusion(np.random.default_rng(3))
        data = np.zeros((512, 8, 8), dtype=np.float32)
        data[0] = np.linspace(0, 1, 8)[None, :].repeat(8, axis=0)
        fmap = FeatureMap(data=data, stride=16.0)
        fused = point_fusion(pts, calib, fmap, reducer, CFG)
        # oracle: sample + reduce each retained point independently
        flat_xyz = []
        for vox in fused.grid.voxels:
            flat_xyz.extend(vox.points[:, :3])
        u, v, _ = geometry.project_points(np.array(flat_xyz), calib)
        expected = reducer.forward(sample_features(fmap, u, v), train=False)
        np.testing.assert_allclose(fused.rows[fused.mask][:, 7:], expected,
                                   atol=1e-9)

    def test_dim_contract_is_23(self):
        calib, pts = self._scene()
        reducer = FeatureReducer.for_point_fusion(np.random.default_rng(4))
        fmap = small_map(np.zeros((512, 8, 8)))
        fused = point_fusion(pts, calib, fmap, reducer, CFG)
        assert fused.row_dim == 23

    def test_wrong_reducer_mode_rejected(self):
        calib, pts = self._scene()
        reducer = FeatureReducer.for_voxel_fusion(np.random.default_rng(5))
        fmap = small_map(np.zeros((512, 8, 8)))
        with pytest.raises(ShapeMismatch):
            point_fusion(pts, calib, fmap, reducer, CFG)

    def test_locality(self):
        calib, pts = self._scene()
        reducer = FeatureReducer.for_point_fusion(np.random.default_rng(6))
        data = np.random.default_rng(7).random((512, 8, 8)).astype(np.float32)
        fused_a = point_fusion(pts, calib, FeatureMap(data=data, stride=16.0),
                               reducer, CFG)
        far = data.copy()
        far[:, 7, 7] += 100.0  # cell no sample neighborhood touches
        fused_b = point_fusion(pts, calib, FeatureMap(data=far, stride=16.0),
                               reducer, CFG)
        assert fused_a.rows.tobytes() == fused_b.rows.tobytes()

    def test_deterministic(self):
        calib, pts = self._scene()
        reducer = FeatureReducer.for_point_fusion(np.random.default_rng(8))
        fmap = small_map(np.random.default_rng(9).random((512, 8, 8)))
        a = point_fusion(pts, calib, fmap, reducer, CFG)
        b = point_fusion(pts, calib, fmap, reducer, CFG)
        assert a.rows.tobytes() == b.rows.tobytes()


class TestVoxelFusion:
    def _voxels(self, calib):
        pts = PointCloud(np.array([[0.0, 0.0, 5.0, 0.2],
                                   [1.0, 1.0, 6.0, 0.4]], dtype=np.float32))
        # identity extrinsics: lidar frame == camera frame, z forward
        cfg = VoxelGridConfig(range_min=(-4, -4, 0), range_max=(4, 4, 8),
                              voxel_size=(0.5, 0.5, 1.0), max_points=8)
        return voxelize(pts, cfg), cfg

    def test_constant_map_pools_constant(self):
        calib = identity_calib(width=100, height=100, focal=50, cx=50, cy=50)
        grid, cfg = self._voxels(calib)
        reducer = FeatureReducer.for_voxel_fusion(np.random.default_rng(1))
        fmap = small_map(np.full((512, 6, 6), 2.5))
        pooled = fusion.pooled_voxel_features(grid.voxels, cfg, calib, fmap)
        np.testing.assert_allclose(pooled, 2.5, atol=1e-9)
        fused = voxel_fusion(np.zeros((len(grid.voxels), 64)), grid.voxels,
                             cfg, calib, fmap, reducer)
        assert fused.row_dim == 128

    def test_behind_camera_equals_reduced_zero(self):
        calib = identity_calib(width=100, height=100, focal=50, cx=50, cy=50)
        cfg = VoxelGridConfig(range_min=(-4, -4, -8), range_max=(4, 4, 0),
                              voxel_size=(1.0, 1.0, 1.0), max_points=8)
        pts = PointCloud(np.array([[0.5, 0.5, -5.0, 0.2]], dtype=np.float32))
        grid = voxelize(pts, cfg)
        reducer = FeatureReducer.for_voxel_fusion(np.random.default_rng(2))
        fmap = small_map(np.random.default_rng(3).random((512, 6, 6)))
        fused = voxel_fusion(np.zeros((1, 64)), grid.voxels, cfg, calib, fmap,
                             reducer)
        expected = reducer.forward(np.zeros((1, 512)), train=False)
        np.testing.assert_allclose(fused.rows[:, 64:], expected, atol=1e-12)

    def test_collapsed_roi_pools_single_cell(self):
        data = np.zeros((512, 5, 5), dtype=np.float32)
        data[:, 2, 3] = 7.0
        fmap = FeatureMap(data=data, stride=1.0)
        roi = Roi(u_min=3.0, v_min=2.0, u_max=3.0, v_max=2.0, valid=True)
        np.testing.assert_allclose(roi_pooled_feature(fmap, roi), 7.0)

    def test_roi_pool_matches_grid_oracle(self, rng):
        data = rng.random((4, 6, 8)).astype(np.float32)
        fmap = FeatureMap(data=data, stride=1.0)
        roi = Roi(u_min=1.2, v_min=0.7, u_max=5.9, v_max=4.1, valid=True)
        got = roi_pooled_feature(fmap, roi)
        samples = []
        for gv in np.linspace(roi.v_min, roi.v_max, 7):
            for gu in np.linspace(roi.u_min, roi.u_max, 7):
                samples.append(sample_feature(fmap, gu, gv))
        np.testing.assert_allclose(got, np.mean(samples, axis=0), atol=1e-9)


class TestConsistency:
    def test_point_sample_equals_collapsed_roi_pool(self, rng):
        # a one-point ROI pools to exactly the bilinear sample at that spot
        data = rng.random((16, 6, 8)).astype(np.float32)
        fmap = FeatureMap(data=data, stride=1.0)
        u, v = 3.25, 2.5
        roi = Roi(u_min=u, v_min=v, u_max=u, v_max=v, valid=True)
        np.testing.assert_allclose(roi_pooled_feature(fmap, roi),
                                   sample_feature(fmap, u, v), atol=1e-6)


class TestRawPatch:
    def _gray(self):
        return Image(np.full((10, 12, 3), 128, dtype=np.uint8))

    def test_constant_gray(self):
        patch = crop_raw_patch(self._gray(), 5, 5, k=3)
        assert patch.shape == (27,)
        np.testing.assert_allclose(patch, 128 / 255)

    def test_corner_clamp_replicates(self):
        img = Image(np.arange(10 * 12 * 3, dtype=np.uint8).reshape(10, 12, 3))
        patch = crop_raw_patch(img, 0, 0, k=3).reshape(3, 3, 3)
        # rows/cols outside clamp to row/col 0
        np.testing.assert_allclose(patch[:, 0, 0], patch[:, 0, 1])
        np.testing.assert_allclose(patch[:, 0, 0], patch[:, 1, 0])

    def test_delta_image(self):
        pixels = np.zeros((9, 9, 3), dtype=np.uint8)
        pixels[4, 4] = 255
        patch = crop_raw_patch(Image(pixels), 4, 4, k=3).reshape(3, 3, 3)
        assert (patch == 1.0).sum() == 3
        np.testing.assert_allclose(patch[:, 1, 1], 1.0)

    def test_even_k_rejected(self):
        with pytest.raises(ValueError):
            crop_raw_patch(self._gray(), 3, 3, k=4)


class TestFeatureMapGenerator:
    def _labels(self):
        return [GroundTruthObject("Car", 0, 0, 0, (16.0, 8.0, 47.0, 39.0),
                                  (1.5, 1.6, 3.9), (0, 0, 10), 0.0)]

    def test_channel_semantics(self):
        fmap = generate_feature_map(self._labels(), image_width=64,
                                    image_height=48, channels=8, stride=8.0)
        assert fmap.data.shape == (8, 6, 8)
        # channel 0: normalized u at cell centers
        np.testing.assert_allclose(fmap.data[0][0], np.arange(8) * 8.0 / 64)
        # channel 2: indicator inside the 2D box
        assert fmap.data[2, 2, 3] == 1.0   # center (24, 16) inside
        assert fmap.data[2, 0, 0] == 0.0
        # channel 3: signature painted where indicator is set
        assert fmap.data[3, 2, 3] > 0.0
        # untouched channels stay zero
        assert np.all(fmap.data[4:] == 0.0)

    def test_dont_care_ignored(self):
        labels = self._labels() + [GroundTruthObject(
            "DontCare", -1, -1, -10, (0.0, 0.0, 63.0, 47.0), (-1, -1, -1),
            (-1000, -1000, -1000), -10)]
        fmap = generate_feature_map(labels, 64, 48, channels=4, stride=8.0)
        assert fmap.data[2, 5, 0] == 0.0  # outside the Car box
