"""Shared fixtures: small synthetic scenes reused across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from voxmesh import Engine, RunConfig
from voxmesh.synth import SceneSpec, camera_pose, render_depth, static_pose


@pytest.fixture(scope="session")
def wall_scene():
    """Fronto-parallel wall at z=1 seen from the origin."""
    spec = SceneSpec(scene="plane", plane_normal=(0, 0, -1), plane_offset=-1.0,
                     width=96, height=96, fx=75.0, fy=75.0)
    pose = static_pose((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    depth = render_depth(spec, pose)
    return spec, pose, depth


@pytest.fixture(scope="session")
def fused_wall(wall_scene):
    """A small reconstruction used by structural tests."""
    spec, pose, depth = wall_scene
    engine = Engine(RunConfig(cube_size=0.02, strategy="serial", workers=1),
                    spec.intrinsics(), audit_every_frame=True)
    for _ in range(3):
        engine.fuse_frame(depth, pose)
    return engine


@pytest.fixture(scope="session")
def sphere_orbit_engine():
    """Sphere observed from a three-ring orbit; fully closed surface."""
    spec = SceneSpec(scene="sphere", sphere_radius=0.3, orbit_radius=0.9,
                     elevation_amp_deg=60.0, angular_step_deg=18.0, frames=18,
                     width=96, height=72, fx=80.0, fy=80.0)
    engine = Engine(RunConfig(cube_size=0.025, strategy="serial", workers=1),
                    spec.intrinsics())
    for i in range(spec.frames):
        pose = camera_pose(spec, i)
        engine.fuse_frame(render_depth(spec, pose), pose)
    return engine


def edge_use_counts(indices: np.ndarray) -> dict:
    """Undirected edge -> number of incident triangles."""
    counts: dict = {}
    for a, b, c in indices:
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            counts[key] = counts.get(key, 0) + 1
    return counts
