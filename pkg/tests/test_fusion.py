"""Block collection along rays and TSDF integration."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxmesh import DepthFrame, Intrinsics, Pose, SpatialStore
from voxmesh.fusion import block_in_frustum, collect_blocks, integrate_frame, truncate
from voxmesh.synth import SceneSpec, render_depth, static_pose

INTR = Intrinsics(fx=64.0, fy=64.0, cx=32.0, cy=24.0, width=64, height=48)


def single_pixel_frame(depth_value: float, u: int = 32, v: int = 24) -> DepthFrame:
    pixels = np.zeros((INTR.height, INTR.width))
    pixels[v, u] = depth_value
    return DepthFrame(pixels)


# -- truncation ---------------------------------------------------------------

def test_truncate_zero():
    assert truncate(0.0, 0.06) == 0.0


def test_truncate_half_band():
    assert truncate(0.03, 0.06) == pytest.approx(0.5)


def test_truncate_saturates():
    assert truncate(-0.2, 0.06) == -1.0
    assert truncate(0.2, 0.06) == 1.0


@given(st.floats(-10, 10, allow_nan=False))
def test_truncate_odd_and_bounded(x):
    t = float(truncate(x, 0.06))
    assert -1.0 <= t <= 1.0
    assert t == pytest.approx(-float(truncate(-x, 0.06)))


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_truncate_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert float(truncate(lo, 0.06)) <= float(truncate(hi, 0.06))


# -- collection ---------------------------------------------------------------

def test_collect_single_pixel_band():
    # principal-point pixel at depth 1 m, identity pose, band +-0.06 m,
    # block extent 8 * 0.03 = 0.24 m
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(1.0)
    got = collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.06)
    # oracle: dense walk over z in [0.94, 1.06]
    expected = {(0, 0, int(np.floor(z / 0.24)))
                for z in np.linspace(0.94, 1.06, 1000)}
    assert set(got) == expected
    assert expected == {(0, 0, 3), (0, 0, 4)}


def test_collect_all_invalid_empty():
    store = SpatialStore(cube_size=0.03)
    frame = DepthFrame(np.zeros((INTR.height, INTR.width)))
    assert collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.06) == []
    assert store.block_count == 0


def test_collect_out_of_range_skipped():
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(3.5)
    got = collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.06,
                         max_range=2.0)
    assert got == []


def test_collect_idempotent():
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(1.0)
    first = collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.06)
    allocs = store.block_allocations
    second = collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.06)
    assert first == second
    assert store.block_allocations == allocs


# -- integration ----------------------------------------------------------------

def test_integrate_first_write():
    # corner (0,0,0.96) projects to the principal pixel; depth 1.0 with
    # trunc 0.08 gives a stored sample of exactly +0.5
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(1.0)
    blocks = collect_blocks(store, frame, Pose.identity(), INTR, trunc=0.08)
    integrate_frame(store, blocks, frame, Pose.identity(), INTR, trunc=0.08)
    d, w = store.corner_sample((0, 0, 32))     # 32 * 0.03 = 0.96
    assert w == 1
    assert d == pytest.approx(0.5, abs=1e-12)


def test_integrate_running_average():
    store = SpatialStore(cube_size=0.03)
    f1 = single_pixel_frame(1.0)     # sdf +0.04 -> +0.5 at z=0.96
    f2 = single_pixel_frame(0.92)    # sdf -0.04 -> -0.5
    pose = Pose.identity()
    b1 = collect_blocks(store, f1, pose, INTR, trunc=0.08)
    integrate_frame(store, b1, f1, pose, INTR, trunc=0.08)
    b2 = collect_blocks(store, f2, pose, INTR, trunc=0.08)
    integrate_frame(store, b2, f2, pose, INTR, trunc=0.08)
    d, w = store.corner_sample((0, 0, 32))
    assert w == 2
    assert d == pytest.approx(0.0, abs=1e-15)


def test_integrate_wall_corner_converges():
    # a corner exactly on a fronto-parallel wall stays at zero tsdf
    intr = Intrinsics(fx=50.0, fy=50.0, cx=24.0, cy=24.0, width=48, height=48)
    store = SpatialStore(cube_size=0.025)
    depth = np.full((48, 48), 1.0)
    frame = DepthFrame(depth)
    pose = Pose.identity()
    for _ in range(10):
        blocks = collect_blocks(store, frame, pose, intr, trunc=0.075)
        integrate_frame(store, blocks, frame, pose, intr, trunc=0.075)
    d, w = store.corner_sample((0, 0, 40))     # 40 * 0.025 = 1.0 exactly
    assert w == 10
    assert abs(d) <= 1e-6


def test_weight_monotone_and_capped():
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(1.0)
    pose = Pose.identity()
    last = 0
    for i in range(6):
        blocks = collect_blocks(store, frame, pose, INTR, trunc=0.08)
        integrate_frame(store, blocks, frame, pose, INTR, trunc=0.08,
                        weight_cap=4)
        _, w = store.corner_sample((0, 0, 32))
        assert w >= last
        last = w
    assert last == 4


def test_sign_correctness_synthetic_plane():
    spec = SceneSpec(scene="plane", plane_normal=(0, 0, -1), plane_offset=-1.0,
                     width=64, height=48, fx=64.0, fy=64.0)
    pose = static_pose((0, 0, 0), (0, 0, 1))
    depth = render_depth(spec, pose)
    store = SpatialStore(cube_size=0.03)
    frame = DepthFrame(depth)
    trunc = 0.09
    blocks = collect_blocks(store, frame, pose, spec.intrinsics(), trunc)
    integrate_frame(store, blocks, frame, pose, spec.intrinsics(), trunc)
    front = behind = 0
    for blk in store.blocks():
        zs = (np.array(blk.coord[2]) * 8 + np.arange(8)) * store.cube_size
        observed = blk.weight > 0
        for z_idx in range(8):
            sel = observed[:, :, z_idx]
            if not sel.any():
                continue
            vals = blk.tsdf[:, :, z_idx][sel]
            z = zs[z_idx]
            if z < 1.0 - 1e-9:
                assert (vals > 0).all()
                front += sel.sum()
            elif z > 1.0 + 1e-9:
                assert (vals < 0).all()
                behind += sel.sum()
    assert front > 0 and behind > 0


def test_frustum_locality_untouched_corners():
    # behind the measured surface beyond the band: never written
    store = SpatialStore(cube_size=0.03)
    frame = single_pixel_frame(1.0)
    pose = Pose.identity()
    blocks = collect_blocks(store, frame, pose, INTR, trunc=0.08)
    integrate_frame(store, blocks, frame, pose, INTR, trunc=0.08)
    for blk in store.blocks():
        occ = np.argwhere(blk.weight > 0)
        for x, y, z in occ:
            gz = blk.coord[2] * 8 + z
            world_z = gz * 0.03
            # within band behind (>= -trunc), anywhere in front
            assert world_z <= 1.0 + 0.08 + 1e-9
    # corners far behind remain unobserved even inside collected blocks
    d, w = store.corner_sample((0, 0, 37))     # z = 1.11 > 1 + 0.08
    assert w == 0


def test_order_insensitive_below_saturation():
    intr = Intrinsics(fx=50.0, fy=50.0, cx=24.0, cy=24.0, width=48, height=48)
    pose = static_pose((0, 0, 0), (0, 0, 1))
    frames = [DepthFrame(np.full((48, 48), 1.0)),
              DepthFrame(np.full((48, 48), 1.02))]

    def fuse(order):
        store = SpatialStore(cube_size=0.025)
        for f in order:
            blocks = collect_blocks(store, f, pose, intr, trunc=0.075)
            integrate_frame(store, blocks, f, pose, intr, trunc=0.075)
        out = {}
        for blk in store.blocks():
            out[blk.coord] = (blk.tsdf.copy(), blk.weight.copy())
        return out

    ab = fuse(frames)
    ba = fuse(frames[::-1])
    assert ab.keys() == ba.keys()
    for k in ab:
        assert np.array_equal(ab[k][1], ba[k][1])
        assert np.allclose(ab[k][0], ba[k][0], atol=1e-12, rtol=0)


# -- frustum test ---------------------------------------------------------------

def test_pose_inverse_composes_to_identity():
    from scipy.spatial.transform import Rotation
    rot = Rotation.from_euler("xyz", [0.3, -0.8, 1.4]).as_matrix()
    pose = Pose(rot, np.array([0.5, -1.2, 2.0]))
    pts = np.random.default_rng(2).normal(size=(10, 3))
    back = pose.inverse_transform(pose.transform(pts))
    assert np.allclose(back, pts, atol=1e-9)
    inv = pose.inverse()
    assert np.allclose(inv.transform(pose.transform(pts)), pts, atol=1e-9)


def test_backprojection_inverts_projection():
    rays = INTR.backproject(np.array([10, 32, 63]), np.array([5, 24, 40]))
    pts = rays * 2.0                       # arbitrary depth
    u = INTR.fx * pts[:, 0] / pts[:, 2] + INTR.cx
    v = INTR.fy * pts[:, 1] / pts[:, 2] + INTR.cy
    assert np.allclose(u, [10, 32, 63])
    assert np.allclose(v, [5, 24, 40])


def test_block_containing_camera_visible():
    pose = Pose.identity()
    assert block_in_frustum((0, 0, 0), pose, INTR, block_extent=0.24)


def test_block_behind_camera_invisible():
    pose = Pose.identity()
    assert not block_in_frustum((0, 0, -50), pose, INTR, block_extent=0.24)


def test_block_ahead_visible():
    pose = Pose.identity()
    assert block_in_frustum((0, 0, 4), pose, INTR, block_extent=0.24)
