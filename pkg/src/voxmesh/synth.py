"""Synthetic depth sequences from analytic signed-distance scenes.

Three scene primitives (plane, sphere, axis-aligned box room) with exact
signed distance, rendered by sphere-tracing every pixel from poses on an
orbit.  The analytic surface doubles as the ground-truth oracle for
reconstruction accuracy tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError
from .fusion import Intrinsics, Pose

_MARCH_TOL = 1e-6
_MARCH_MAX_STEPS = 128


@dataclass
class SceneSpec:
    scene: str = "plane"                     # plane | sphere | room
    # plane: unit normal and offset; surface is {p : n.p = offset}
    plane_normal: tuple[float, float, float] = (0.0, 0.0, -1.0)
    plane_offset: float = -1.0
    # sphere; inverted = hollow shell observed from inside (free space
    # within the radius), the well-conditioned analogue of a domed room
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sphere_radius: float = 0.5
    sphere_inverted: bool = False
    # room: camera-side interior of an axis-aligned box
    room_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    room_size: tuple[float, float, float] = (4.0, 3.0, 2.5)
    # camera path
    orbit_radius: float = 1.0
    orbit_height: float = 0.0
    angular_step_deg: float = 6.0
    elevation_amp_deg: float = 0.0           # half-span of the elevation rings
    elevation_rings: int = 3                 # rings cycled across frames
    look: str = "inward"                     # inward | outward
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orbit_center: Optional[tuple[float, float, float]] = None  # default: target
    frames: int = 60
    # imaging
    width: int = 128
    height: int = 96
    fx: float = 100.0
    fy: float = 100.0
    cx: Optional[float] = None               # default: image centre
    cy: Optional[float] = None
    max_depth: float = 10.0
    noise_sigma: float = 0.0
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return Intrinsics(self.fx, self.fy, cx, cy, self.width, self.height)


def scene_sdf(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Exact signed distance; positive on the observable (free-space) side."""
    pts = np.asarray(pts, dtype=np.float64)
    if spec.scene == "plane":
        n = np.asarray(spec.plane_normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return pts @ n - spec.plane_offset
    if spec.scene == "sphere":
        c = np.asarray(spec.sphere_center, dtype=np.float64)
        d = np.linalg.norm(pts - c, axis=-1) - spec.sphere_radius
        return -d if spec.sphere_inverted else d
    if spec.scene == "room":
        c = np.asarray(spec.room_center, dtype=np.float64)
        half = np.asarray(spec.room_size, dtype=np.float64) / 2.0
        # positive inside the room, zero on the walls, negative beyond
        return (half - np.abs(pts - c)).min(axis=-1)
    raise InputError(f"unknown scene kind {spec.scene!r}")


def tilted_plane_spec(tilt_deg: float, distance: float = 1.0, **kw) -> SceneSpec:
    """A plane facing the camera, tilted about the y axis by ``tilt_deg``."""
    t = math.radians(tilt_deg)
    normal = (math.sin(t), 0.0, -math.cos(t))
    # camera orbits near the origin looking +z; plane sits ``distance`` ahead
    offset = -(distance * math.cos(t))
    return SceneSpec(scene="plane", plane_normal=normal, plane_offset=offset, **kw)


def camera_pose(spec: SceneSpec, i: int) -> Pose:
    """Pose of frame ``i`` on the orbit, z axis looking at/away from target.

    A nonzero ``elevation_amp_deg`` cycles successive frames through
    ``elevation_rings`` evenly spaced elevation rings spanning
    [-amp, +amp], so the whole target surface receives frontal-enough
    views.
    """
    theta = math.radians(spec.angular_step_deg) * i
    if spec.elevation_amp_deg and spec.elevation_rings > 1:
        k = spec.elevation_rings
        phi = math.radians(spec.elevation_amp_deg) * (2.0 * (i % k) / (k - 1) - 1.0)
    else:
        phi = 0.0
    target = np.asarray(spec.target, dtype=np.float64)
    center = (target if spec.orbit_center is None
              else np.asarray(spec.orbit_center, dtype=np.float64))
    offset = np.array([
        spec.orbit_radius * math.cos(theta) * math.cos(phi),
        spec.orbit_radius * math.sin(theta) * math.cos(phi),
        spec.orbit_height + spec.orbit_radius * math.sin(phi),
    ])
    position = center + offset
    fwd = (target - position) if spec.look == "inward" else (position - target)
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        fwd = np.array([0.0, 0.0, 1.0])
    else:
        fwd = fwd / n
    up = np.array([0.0, 0.0, -1.0])          # image v grows downwards
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, -1.0, 0.0])
    right = np.cross(up, fwd) * -1.0
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)  # columns: camera x, y, z in world
    return Pose(rot, position)


def static_pose(position, look_at) -> Pose:
    """Pose at ``position`` with the optical axis through ``look_at``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(look_at, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, -1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, -1.0, 0.0])
    right = np.cross(up, fwd) * -1.0
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), position)


def render_depth(spec: SceneSpec, pose: Pose,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sphere-trace a z-depth image (metres; 0 where the march fails)."""
    intr = spec.intrinsics()
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs_cam = intr.backproject(u, v).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1)[:, None]
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    t = np.zeros(dirs.shape[0], dtype=np.float64)
    done = np.zeros(dirs.shape[0], dtype=bool)
    hit = np.zeros(dirs.shape[0], dtype=bool)
    for _ in range(_MARCH_MAX_STEPS):
        live = ~done
        if not live.any():
            break
        pts = origin + dirs[live] * t[live, None]
        d = scene_sdf(spec, pts)
        close = d < _MARCH_TOL
        idx = np.nonzero(live)[0]
        hit[idx[close]] = True
        done[idx[close]] = True
        t[idx[~close]] += d[~close]
        over = t > spec.max_depth
        done |= over
    ray_depth = np.where(hit, t, 0.0)
    # convert ray length to z-depth (camera-frame z of the hit point)
    z = ray_depth * (dirs_cam @ np.array([0.0, 0.0, 1.0]))
    if rng is not None and spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=z.shape)
        z = np.where(z > 0, np.maximum(z + noise, 1e-4), 0.0)
    return z.reshape(intr.height, intr.width)


def frame_poses(spec: SceneSpec) -> list[Pose]:
    return [camera_pose(spec, i) for i in range(spec.frames)]


def synth_sequence(spec: SceneSpec, outdir, depth_scale: float = 5000.0) -> None:
    """Write depth PGMs, a trajectory file, and intrinsics for the scene."""
    from . import io_formats

    outdir = Path(outdir)
    depth_dir = outdir / "depth"
    depth_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed) if spec.noise_sigma > 0 else None
    poses = frame_poses(spec)
    for i, pose in enumerate(poses):
        depth = render_depth(spec, pose, rng)
        io_formats.write_depth(depth_dir / f"{i:06d}.pgm", depth, depth_scale)
    io_formats.write_trajectory(outdir / "trajectory.txt",
                                [(float(i), p) for i, p in enumerate(poses)])
    io_formats.write_intrinsics(outdir / "intrinsics.txt", spec.intrinsics())
