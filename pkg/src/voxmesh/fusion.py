"""Per-frame block collection along depth rays and TSDF integration.

For every valid depth pixel a ray is walked through a band around the
measured point; the blocks it touches are allocated and only those are
integrated.  Integration projects each cube corner of the collected
blocks into the depth image, computes the truncated signed distance to
the measurement along the optical axis, and folds it into the stored
sample with a weighted running average capped at ``weight_cap``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import BLOCK_SIZE, SpatialStore


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def backproject(self, u, v):
        """Unit-depth camera-frame directions (x/z, y/z, 1) for pixels."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Sensor-to-world rigid transform."""

    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Camera frame -> world frame."""
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, pts: np.ndarray) -> np.ndarray:
        """World frame -> camera frame."""
        return (pts - self.translation) @ self.rotation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T.copy(), -(self.rotation.T @ self.translation))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass
class DepthFrame:
    pixels: np.ndarray   # (H, W) float64 metres, 0 = invalid
    frame_index: int = 0


def truncate(sdf_metric, trunc: float):
    """Scale a metric signed distance by the truncation band and clamp to [-1, 1]."""
    return np.clip(np.asarray(sdf_metric, dtype=np.float64) / trunc, -1.0, 1.0)


def collect_blocks(store: SpatialStore, frame: DepthFrame, pose: Pose,
                   intr: Intrinsics, trunc: float,
                   max_range: float = np.inf) -> list[tuple[int, int, int]]:
    """Allocate and return the blocks touched by this frame's update band.

    Each valid pixel's ray is sampled over length factors [1-d, 1+d] with
    d = trunc/depth, so the walk spans the truncation band around the
    measured point.  The sample step never exceeds half a block extent,
    which is what bounds the blocks a ray can skip.
    """
    depth = frame.pixels
    v_idx, u_idx = np.nonzero((depth > 0) & (depth <= max_range))
    if v_idx.size == 0:
        return []
    d = depth[v_idx, u_idx]
    rays = intr.backproject(u_idx, v_idx)            # (N, 3) unit-depth
    pts_cam = rays * d[:, None]                      # measured points, camera frame
    qs = pts_cam @ pose.rotation.T                   # rotated, before translation
    ray_norm = np.linalg.norm(rays, axis=1)

    half_block = store.block_extent * 0.5
    # metric length walked per unit lambda is depth*|ray|; pick one step
    # count that keeps every pixel's metric step under half a block
    band_metric = 2.0 * trunc * float(ray_norm.max())
    nsteps = max(2, int(np.ceil(band_metric / half_block)) + 1)
    delta = trunc / d                                # per pixel
    lam = np.linspace(-1.0, 1.0, nsteps)             # scaled into [1-d, 1+d]

    seen = set()
    origin = pose.translation
    for s in lam:
        pts = origin + qs * (1.0 + s * delta)[:, None]
        coords = np.floor(pts / store.block_extent).astype(np.int64)
        seen.update(_unique_coords(coords))
    out = sorted(seen)
    for coord in out:
        store.get_or_allocate_block(coord)
    return out


def _unique_coords(coords: np.ndarray) -> list[tuple[int, int, int]]:
    # pack signed coords into one sortable int64 (21 bits per axis)
    off = np.int64(1 << 20)
    packed = np.unique(((coords[:, 0] + off) << 42)
                       | ((coords[:, 1] + off) << 21)
                       | (coords[:, 2] + off))
    x = (packed >> 42) - off
    y = ((packed >> 21) & ((1 << 21) - 1)) - off
    z = (packed & ((1 << 21) - 1)) - off
    return [(int(a), int(b), int(c)) for a, b, c in zip(x, y, z)]


def integrate_frame(store: SpatialStore, blocks, frame: DepthFrame, pose: Pose,
                    intr: Intrinsics, trunc: float, max_range: float = np.inf,
                    weight_cap: int = 128) -> None:
    """Fold this frame's truncated distances into the collected blocks.

    Corners projecting outside the image, onto invalid pixels, or more
    than one band behind the measured surface are untouched.
    """
    depth = frame.pixels
    h, w = depth.shape
    rot_wc = pose.rotation.T
    t = pose.translation
    lx, ly, lz = np.meshgrid(np.arange(BLOCK_SIZE), np.arange(BLOCK_SIZE),
                             np.arange(BLOCK_SIZE), indexing="ij")
    locals_flat = np.stack([lx, ly, lz], axis=-1).reshape(-1, 3)

    for coord in blocks:
        blk = store.get_block(coord)
        if blk is None:
            continue
        base = np.array(coord, dtype=np.float64) * store.block_extent
        corners = base + locals_flat * store.cube_size
        cam = (corners - t) @ rot_wc.T
        z = cam[:, 2]
        ok = z > 0
        u = np.full(z.shape, -1.0)
        v = np.full(z.shape, -1.0)
        u[ok] = np.rint(intr.fx * cam[ok, 0] / z[ok] + intr.cx)
        v[ok] = np.rint(intr.fy * cam[ok, 1] / z[ok] + intr.cy)
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        if not ok.any():
            continue
        ui = u[ok].astype(np.intp)
        vi = v[ok].astype(np.intp)
        meas = depth[vi, ui]
        valid = (meas > 0) & (meas <= max_range)
        sdf = meas - z[ok]
        valid &= sdf >= -trunc
        if not valid.any():
            continue
        idx = np.nonzero(ok)[0][valid]
        d_new = np.clip(sdf[valid] / trunc, -1.0, 1.0)
        tsdf = blk.tsdf.reshape(-1)
        weight = blk.weight.reshape(-1)
        w_old = weight[idx].astype(np.float64)
        tsdf[idx] = (w_old * tsdf[idx] + d_new) / (w_old + 1.0)
        weight[idx] = np.minimum(weight[idx] + 1, weight_cap)


def block_in_frustum(coord: tuple[int, int, int], pose: Pose, intr: Intrinsics,
                     block_extent: float) -> bool:
    """Conservative visibility: any block corner projects into the image
    with positive depth, or the camera sits inside the block."""
    base = np.array(coord, dtype=np.float64) * block_extent
    cam_pos = pose.translation
    if np.all(cam_pos >= base) and np.all(cam_pos <= base + block_extent):
        return True
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                    dtype=np.float64)
    corners = base + offs * block_extent
    cam = (corners - cam_pos) @ pose.rotation
    z = cam[:, 2]
    front = z > 0
    if not front.any():
        return False
    u = intr.fx * cam[front, 0] / z[front] + intr.cx
    v = intr.fy * cam[front, 1] / z[front] + intr.cy
    inside = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return bool(inside.any())
