import math

import numpy as np
import pytest

from voxfuse.kitti_io import Calibration


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd)
LIDAR_TO_CAM_AXES = np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0]], dtype=np.float64)


def identity_calib(width=10, height=10, focal=1.0, cx=0.0, cy=0.0):
    """Calibration whose LiDAR frame coincides with the camera frame."""
    P = np.array([[focal, 0, cx, 0], [0, focal, cy, 0], [0, 0, 1, 0]],
                 dtype=np.float64)
    return Calibration(P=P, R0=np.eye(3), Tr=np.hstack([np.eye(3), np.zeros((3, 1))]),
                       image_width=width, image_height=height)


def kitti_style_calib(width=1242, height=375):
    """Realistic projection chain: focal camera, tilted R0, offset extrinsics."""
    P = np.array([[721.5377, 0.0, 609.5593, 44.857],
                  [0.0, 721.5377, 172.854, 0.2163],
                  [0.0, 0.0, 1.0, 0.0027]], dtype=np.float64)
    R0 = rot_z(0.002) @ rot_y(-0.003) @ rot_x(0.001)
    Tr_rot = LIDAR_TO_CAM_AXES @ rot_z(0.01) @ rot_x(-0.005)
    Tr = np.hstack([Tr_rot, np.array([[0.05], [-0.07], [-0.27]])])
    return Calibration(P=P, R0=R0, Tr=Tr, image_width=width, image_height=height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_calib(width=128, height=96, focal=64.0):
    """Small camera over the toy detection range."""
    P = np.array([[focal, 0, width / 2, 0], [0, focal, height / 2, 0],
                  [0, 0, 1, 0]], dtype=np.float64)
    Tr = np.hstack([LIDAR_TO_CAM_AXES, np.array([[0.02], [-0.05], [-0.1]])])
    return Calibration(P=P, R0=np.eye(3), Tr=Tr,
                       image_width=width, image_height=height)


def toy_cloud(rng, n=600, x=(3, 11), y=(-2.5, 2.5), z=(-1.9, -0.2)):
    pts = np.column_stack([rng.uniform(*x, n), rng.uniform(*y, n),
                           rng.uniform(*z, n), rng.uniform(0.2, 0.9, n)])
    return pts.astype(np.float32)
