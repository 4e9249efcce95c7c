"""Incremental depth fusion into a spatial-hashed TSDF with a compact,
shared-vertex triangle mesh maintained frame by frame."""

from .engine import Engine, RunConfig, StatsRow
from .errors import CapacityError, ConsistencyError, InputError, VoxmeshError
from .fusion import DepthFrame, Intrinsics, Pose
from .refine import REGULAR_TYPES, RefineParams, detect_disturbance, hamming
from .store import (
    BLOCK_SIZE,
    Axis,
    Block,
    CompactMesh,
    EdgeKey,
    SpatialStore,
    hash_block,
)
from .synth import SceneSpec, render_depth, scene_sdf, synth_sequence

__version__ = "0.1.0"

__all__ = [
    "Engine", "RunConfig", "StatsRow",
    "CapacityError", "ConsistencyError", "InputError", "VoxmeshError",
    "DepthFrame", "Intrinsics", "Pose",
    "REGULAR_TYPES", "RefineParams", "detect_disturbance", "hamming",
    "BLOCK_SIZE", "Axis", "Block", "CompactMesh", "EdgeKey",
    "SpatialStore", "hash_block",
    "SceneSpec", "render_depth", "scene_sdf", "synth_sequence",
    "__version__",
]
