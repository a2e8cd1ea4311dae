"""Detector configuration: network dims, grid, anchors, loss, schedule.

Configs load from flat TOML-style text (``key = value`` lines with
optional ``[schedule]`` style sections). Two presets exist: the
full-scale layout (352x400x10 grid, the published training schedule)
and a desk-scale toy that exercises the identical code paths in
seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .geometry import VoxelGridConfig

FUSION_MODES = ("lidar", "pointfusion", "voxelfusion", "rawpatch3", "rawpatch5")


@dataclass
class Schedule:
    lr: float = 0.01
    epochs: int = 30
    decay_epoch: int = 20
    decay_factor: float = 0.1
    momentum: float = 0.9
    checkpoint_every: int = 0  # epochs; 0 = only on completion

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.decay_factor if epoch >= self.decay_epoch else 1.0)


@dataclass
class NetworkConfig:
    fusion_mode: str = "lidar"
    # crop range and voxelization
    range_min: tuple = (0.0, -40.0, -3.0)
    range_max: tuple = (70.4, 40.0, 1.0)
    voxel_size: tuple = (0.2, 0.2, 0.4)
    max_points_per_voxel: int = 35
    # encoder / middle / head dims
    vfe_out: tuple = (32, 128)          # voxelfusion preset uses (32, 64)
    middle_channels: tuple = (64, 64, 64)
    middle_strides: tuple = ((2, 1, 1), (1, 1, 1), (2, 1, 1))
    middle_pads: tuple = ((1, 1, 1), (1, 1, 1), (1, 1, 1))
    rpn_channels: tuple = (128, 128, 256)
    rpn_convs_per_block: int = 2        # trimmed: downsample + one stride-1 conv
    rpn_deconv_channels: int = 128
    image_channels: int = 512
    feature_stride: float = 16.0
    # anchors and matching
    anchor_size: tuple = (3.9, 1.6, 1.56)
    anchor_z: float = -1.0
    anchor_yaws: tuple = (0.0, math.pi / 2)
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    # loss
    loss_alpha: float = 1.5
    loss_beta: float = 1.0
    loss_lambda: float = 2.0
    # inference
    score_threshold: float = 0.3
    nms_iou: float = 0.1
    pre_nms_top_k: int = 100
    max_detections: int = 50
    # pipeline behavior
    frustum_crop: bool | None = None    # None: fusion modes crop, lidar does not
    sampling: str = "bilinear"
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")

    @property
    def crops_to_frustum(self) -> bool:
        if self.frustum_crop is not None:
            return self.frustum_crop
        return self.fusion_mode != "lidar"

    @property
    def patch_k(self) -> int:
        return {"rawpatch3": 3, "rawpatch5": 5}.get(self.fusion_mode, 0)

    def voxel_cfg(self, rng_seed=None) -> VoxelGridConfig:
        return VoxelGridConfig(
            range_min=self.range_min, range_max=self.range_max,
            voxel_size=self.voxel_size, max_points=self.max_points_per_voxel,
            rng_seed=self.seed if rng_seed is None else rng_seed)

    @property
    def grid_shape(self):
        return self.voxel_cfg().grid_shape


def toy_config(fusion_mode="lidar", **overrides) -> NetworkConfig:
    """Desk-scale preset: 32x32x4 grid, slim channels, short schedule."""
    cfg = NetworkConfig(
        fusion_mode=fusion_mode,
        range_min=(0.0, -6.4, -3.0), range_max=(12.8, 6.4, 1.0),
        voxel_size=(0.4, 0.4, 2.0), max_points_per_voxel=20,
        vfe_out=(32, 64) if fusion_mode == "voxelfusion" else (32, 128),
        middle_channels=(32, 32, 32),
        rpn_channels=(32, 32, 32), rpn_deconv_channels=32,
        feature_stride=8.0,
        # the 0.8 m anchor lattice is 2x coarser than full scale, so the
        # matching band shifts down to keep threshold positives reachable
        pos_iou=0.45, neg_iou=0.30,
        schedule=Schedule(lr=0.01, epochs=30, decay_epoch=20),
    )
    return replace(cfg, **overrides) if overrides else cfg


def full_kitti_config(fusion_mode="lidar", **overrides) -> NetworkConfig:
    """Full-scale preset matching the published layout and schedule."""
    cfg = NetworkConfig(
        fusion_mode=fusion_mode,
        vfe_out=(32, 64) if fusion_mode == "voxelfusion" else (32, 128),
        schedule=Schedule(lr=0.01, epochs=160, decay_epoch=150),
    )
    return replace(cfg, **overrides) if overrides else cfg


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return ()
        return tuple(_parse_value(part) for part in _split_top_level(inner))
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    if text == "none":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _split_top_level(text: str):
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return [p for p in (part.strip() for part in parts) if p]


def load_config(path) -> NetworkConfig:
    """Read a flat TOML-style config file into a NetworkConfig.

    Unknown keys are rejected. A ``[schedule]`` section (or dotted
    ``schedule.lr`` keys) populates the training schedule.
    """
    cfg_fields = {f.name for f in fields(NetworkConfig)}
    sched_fields = {f.name for f in fields(Schedule)}
    top, sched = {}, {}
    section = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("schedule", "detector", ""):
                raise ValueError(f"{path}:{lineno}: unknown section {section!r}")
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = _parse_value(value)
        if section == "schedule" or key.startswith("schedule."):
            key = key.removeprefix("schedule.")
            if key not in sched_fields:
                raise ValueError(f"{path}:{lineno}: unknown schedule key {key!r}")
            sched[key] = value
        else:
            if key not in cfg_fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            top[key] = value
    cfg = NetworkConfig(**top)
    if sched:
        cfg = replace(cfg, schedule=Schedule(**sched))
    return cfg


def dump_config(cfg: NetworkConfig) -> str:
    """Render a NetworkConfig back to the flat text format."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (tuple, list)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = []
    for f in fields(NetworkConfig):
        if f.name == "schedule":
            continue
        lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    lines.append("")
    lines.append("[schedule]")
    for f in fields(Schedule):
        lines.append(f"{f.name} = {fmt(getattr(cfg.schedule, f.name))}")
    return "\n".join(lines) + "\n"
