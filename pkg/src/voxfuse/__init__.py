"""LiDAR-camera fusion 3D object detection pipeline.

Point clouds are voxelized and encoded by trainable voxel feature
layers; camera evidence is fused in at point or voxel granularity; a
small convolutional head regresses oriented boxes that are scored with
a KITTI-protocol evaluator.
"""

__version__ = "0.1.0"
