"""Exception types raised across the pipeline."""


class VoxfuseError(Exception):
    """Base class for all package errors."""


# --- file format errors ---

class TruncatedFile(VoxfuseError):
    pass


class NonFiniteValue(VoxfuseError):
    pass


class MissingKey(VoxfuseError):
    pass


class MalformedMatrix(VoxfuseError):
    pass


class FieldCount(VoxfuseError):
    pass


class NumericParse(VoxfuseError):
    pass


class BadMagic(VoxfuseError):
    pass


class UnsupportedDtype(VoxfuseError):
    pass


class UnsupportedRank(VoxfuseError):
    pass


class TruncatedPixelData(VoxfuseError):
    pass


class IoFailure(VoxfuseError):
    pass


# --- geometry errors ---

class SingularTransform(VoxfuseError):
    pass


class EmptyVoxel(VoxfuseError):
    pass


# --- neural errors ---

class BatchTooSmall(VoxfuseError):
    pass


class EmptyVoxelRow(VoxfuseError):
    pass


class ShapeMismatch(VoxfuseError):
    pass


# --- fusion / detector errors ---

class NoVisiblePoints(VoxfuseError):
    pass


class IndivisibleGrid(VoxfuseError):
    pass


class NonPositiveSize(VoxfuseError):
    pass


class NoNegatives(VoxfuseError):
    pass


class DivergedLoss(VoxfuseError):
    pass


# --- eval errors ---

class SceneMismatch(VoxfuseError):
    pass
