"""Readers and writers for the on-disk formats used by the pipeline.

Velodyne ``.bin`` point clouds, calibration text files, label/result text
files, NPY feature-map tensors (with a stride sidecar), and binary PPM
images. All readers are pure functions of file content and return
immutable-by-convention values.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    FieldCount,
    IoFailure,
    MalformedMatrix,
    MissingKey,
    NonFiniteValue,
    NumericParse,
    TruncatedFile,
    TruncatedPixelData,
    UnsupportedDtype,
    UnsupportedRank,
)

POINT_RECORD_BYTES = 16  # four little-endian f32 per LiDAR return

# KITTI left color camera sensor size; calib files do not store it.
DEFAULT_IMAGE_WIDTH = 1242
DEFAULT_IMAGE_HEIGHT = 375


@dataclass(frozen=True)
class PointCloud:
    """LiDAR returns as an (N, 4) float array of x, y, z, reflectance."""

    xyzr: np.ndarray

    def __len__(self):
        return self.xyzr.shape[0]

    @property
    def xyz(self):
        return self.xyzr[:, :3]

    @property
    def reflectance(self):
        return self.xyzr[:, 3]


@dataclass(frozen=True)
class Calibration:
    """Projection chain from the LiDAR frame to image pixels.

    ``P`` is the 3x4 camera projection (pixels), ``R0`` the 3x3
    rectification rotation, ``Tr`` the 3x4 rigid LiDAR-to-camera
    transform. Rotation blocks must be orthonormal within 1e-3.
    """

    P: np.ndarray
    R0: np.ndarray
    Tr: np.ndarray
    image_width: int = DEFAULT_IMAGE_WIDTH
    image_height: int = DEFAULT_IMAGE_HEIGHT

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        R0 = np.asarray(self.R0, dtype=np.float64)
        Tr = np.asarray(self.Tr, dtype=np.float64)
        if P.shape != (3, 4) or R0.shape != (3, 3) or Tr.shape != (3, 4):
            raise MalformedMatrix(
                f"bad calibration shapes P{P.shape} R0{R0.shape} Tr{Tr.shape}")
        for name, rot in (("R0", R0), ("Tr rotation block", Tr[:, :3])):
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-3):
                raise MalformedMatrix(f"{name} is not orthonormal within 1e-3")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R0", R0)
        object.__setattr__(self, "Tr", Tr)


@dataclass
class GroundTruthObject:
    """One label-file entry; DontCare rows are retained and flagged."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple  # (left, top, right, bottom) pixels
    dims: tuple    # (h, w, l) meters
    location: tuple  # (x, y, z) meters, rectified camera frame
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self):
        return self.class_name == "DontCare"


@dataclass(frozen=True)
class FeatureMap:
    """Dense (channels, height, width) float32 map from a 2D detector.

    ``stride`` is pixels-per-cell relative to the rescaled image and
    ``rescale`` maps original pixels to rescaled pixels, so a projected
    point (u, v) in original image coordinates lands at feature-cell
    coordinates (u * rescale / stride, v * rescale / stride).
    """

    data: np.ndarray
    stride: float
    rescale: float = 1.0

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if self.data.ndim != 3:
            raise UnsupportedRank(f"feature map rank {self.data.ndim} != 3")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class Image:
    """8-bit RGB raster; ``as_float`` rescales to [0, 1]."""

    pixels: np.ndarray  # (H, W, 3) uint8

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def as_float(self):
        return self.pixels.astype(np.float64) / 255.0


@dataclass
class Detection:
    box: "object"  # geometry.Box3D, LiDAR frame
    score: float
    class_name: str = "Car"


def read_point_cloud(path) -> PointCloud:
    """Read a packed little-endian f32 quadruple file, one point per record."""
    raw = Path(path).read_bytes()
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise TruncatedFile(
            f"{path}: size {len(raw)} is not a multiple of {POINT_RECORD_BYTES}")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    if pts.size and not np.all(np.isfinite(pts)):
        raise NonFiniteValue(f"{path}: NaN or Inf in point record")
    return PointCloud(pts)


def write_point_cloud(path, xyzr) -> None:
    arr = np.ascontiguousarray(np.asarray(xyzr, dtype="<f4").reshape(-1, 4))
    Path(path).write_bytes(arr.tobytes())


_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calibration(path, image_width=DEFAULT_IMAGE_WIDTH,
                     image_height=DEFAULT_IMAGE_HEIGHT) -> Calibration:
    """Parse ``KEY: v0 v1 ...`` lines; only P2, R0_rect, Tr_velo_to_cam are used.

    Image dimensions are not stored in calibration files, so they are
    supplied by the caller (pipelines pass the actual image size).
    """
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        entries[key.strip()] = rest.split()
    matrices = {}
    for key, shape in _CALIB_SHAPES.items():
        if key not in entries:
            raise MissingKey(f"{path}: calibration key {key!r} missing")
        values = entries[key]
        if len(values) != shape[0] * shape[1]:
            raise MalformedMatrix(
                f"{path}: {key} has {len(values)} elements, expected {shape[0] * shape[1]}")
        try:
            matrices[key] = np.array([float(v) for v in values],
                                     dtype=np.float64).reshape(shape)
        except ValueError as exc:
            raise MalformedMatrix(f"{path}: {key}: {exc}") from exc
    return Calibration(P=matrices["P2"], R0=matrices["R0_rect"],
                       Tr=matrices["Tr_velo_to_cam"],
                       image_width=image_width, image_height=image_height)


def write_calibration(path, calib: Calibration) -> None:
    """Emit a calib file; P0/P1/P3 duplicate P2 since only P2 is consumed."""
    def row(mat):
        return " ".join(f"{v:.12e}" for v in np.asarray(mat).ravel())

    lines = [f"P{i}: {row(calib.P)}" for i in range(4)]
    lines.append(f"R0_rect: {row(calib.R0)}")
    lines.append(f"Tr_velo_to_cam: {row(calib.Tr)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> list[GroundTruthObject]:
    """Parse KITTI label lines (15 fields) or result lines (16, with score)."""
    objects = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise FieldCount(
                f"{path}:{lineno}: {len(fields)} fields, expected 15 or 16")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise NumericParse(f"{path}:{lineno}: {exc}") from exc
        objects.append(GroundTruthObject(
            class_name=fields[0],
            truncation=values[0],
            occlusion=int(values[1]),
            alpha=values[2],
            bbox2d=tuple(values[3:7]),
            dims=tuple(values[7:10]),
            location=tuple(values[10:13]),
            rotation_y=values[13],
            score=values[14] if len(fields) == 16 else None,
        ))
    return objects


def write_labels(path, objects) -> None:
    lines = []
    for obj in objects:
        fields = [obj.class_name,
                  f"{obj.truncation:.2f}", str(int(obj.occlusion)),
                  f"{obj.alpha:.4f}"]
        fields += [f"{v:.4f}" for v in obj.bbox2d]
        fields += [f"{v:.4f}" for v in obj.dims]
        fields += [f"{v:.4f}" for v in obj.location]
        fields.append(f"{obj.rotation_y:.4f}")
        if obj.score is not None:
            fields.append(f"{obj.score:.4f}")
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


_NPY_MAGIC = b"\x93NUMPY"


def read_tensor(path, stride=None) -> FeatureMap:
    """Read an NPY v1.0 rank-3 little-endian f32 tensor, bit-exactly.

    The cell stride is not part of NPY; it comes from the ``stride``
    argument, else from a ``<name>.stride`` sidecar, else defaults to 1.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise BadMagic(f"{path}: not an NPY file")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise BadMagic(f"{path}: NPY version {major}.{minor}, expected 1.0")
    header_len = int.from_bytes(raw[8:10], "little")
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise TruncatedFile(f"{path}: header truncated")
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except (ValueError, KeyError, SyntaxError) as exc:
        raise BadMagic(f"{path}: unparseable NPY header: {exc}") from exc
    if descr != "<f4":
        raise UnsupportedDtype(f"{path}: dtype {descr!r}, expected '<f4'")
    if fortran:
        raise UnsupportedDtype(f"{path}: fortran order not supported")
    if len(shape) != 3:
        raise UnsupportedRank(f"{path}: rank {len(shape)}, expected 3")
    count = int(np.prod(shape)) if shape else 0
    payload = raw[header_end:]
    if len(payload) < count * 4:
        raise TruncatedFile(f"{path}: payload has {len(payload)} bytes, "
                            f"needs {count * 4}")
    data = np.frombuffer(payload[:count * 4], dtype="<f4").reshape(shape)
    if stride is None:
        sidecar = path.with_suffix(".stride")
        stride = float(sidecar.read_text().strip()) if sidecar.exists() else 1.0
    return FeatureMap(data=data.copy(), stride=float(stride))


def write_tensor(path, data, stride=None) -> None:
    """Write a (C, H, W) float32 array as NPY v1.0 plus optional stride sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    if arr.ndim != 3:
        raise UnsupportedRank(f"refusing to write rank-{arr.ndim} tensor")
    header = ("{'descr': '<f4', 'fortran_order': False, "
              f"'shape': {tuple(int(s) for s in arr.shape)!r}, }}")
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC + bytes([1, 0]))
        fh.write(len(header).to_bytes(2, "little"))
        fh.write(header.encode("latin1"))
        fh.write(arr.tobytes())
    if stride is not None:
        path.with_suffix(".stride").write_text(f"{float(stride)}\n")


def read_image(path) -> Image:
    """Read a binary PPM (P6, maxval 255)."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise BadMagic(f"{path}: not a binary PPM (P6) file")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens, pos = [], 2
    while len(tokens) < 3 and pos < len(raw):
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) < 3:
        raise TruncatedPixelData(f"{path}: incomplete PPM header")
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise BadMagic(f"{path}: bad PPM header: {exc}") from exc
    if maxval != 255:
        raise BadMagic(f"{path}: maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    pixels = raw[pos:]
    if len(pixels) < width * height * 3:
        raise TruncatedPixelData(
            f"{path}: {len(pixels)} pixel bytes, expected {width * height * 3}")
    arr = np.frombuffer(pixels[:width * height * 3], dtype=np.uint8)
    return Image(arr.reshape(height, width, 3).copy())


def write_image(path, pixels) -> None:
    arr = np.ascontiguousarray(np.asarray(pixels, dtype=np.uint8))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 pixels")
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def write_detections(path, detections, calib: Calibration) -> None:
    """Write detections in result format: 15 label fields plus a score.

    Boxes are converted from the LiDAR frame back to camera-frame label
    geometry; truncation/occlusion are emitted as -1 (unknown).
    """
    from . import geometry

    lines = []
    for det in detections:
        if not math.isfinite(det.score):
            raise IoFailure(f"non-finite score {det.score!r}")
        gt = geometry.lidar_box_to_camera(det.box, calib)
        x, y, z = gt.location
        alpha = geometry.normalize_angle(gt.rotation_y - math.atan2(x, z))
        rect = geometry.box_image_rect(det.box, calib)
        fields = [det.class_name, "-1", "-1", f"{alpha:.4f}"]
        fields += [f"{v:.4f}" for v in rect]
        fields += [f"{v:.4f}" for v in gt.dims]
        fields += [f"{v:.4f}" for v in gt.location]
        fields += [f"{gt.rotation_y:.4f}", f"{det.score:.4f}"]
        lines.append(" ".join(fields))
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
