"""File formats: depth PGM, trajectories, intrinsics, OBJ/PLY, stats CSV."""

import csv

import numpy as np
import pytest

from voxmesh import Engine, InputError, Intrinsics, Pose, RunConfig
from voxmesh.engine import StatsRow
from voxmesh.io_formats import (
    age_colors,
    read_depth,
    read_intrinsics,
    read_trajectory,
    write_depth,
    write_intrinsics,
    write_obj,
    write_ply,
    write_stats,
    write_trajectory,
)
from voxmesh.store import CompactMesh
from voxmesh.synth import SceneSpec, render_depth, static_pose, synth_sequence


# -- depth PGM ----------------------------------------------------------------

def test_depth_scale_convention(tmp_path):
    path = tmp_path / "d.pgm"
    img = np.array([[1.0, 0.0], [0.25, 2.0]])
    write_depth(path, img, depth_scale=5000.0)
    back = read_depth(path, depth_scale=5000.0)
    assert back[0, 0] == pytest.approx(1.0)       # raw 5000 / 5000
    assert back[0, 1] == 0.0                      # raw 0 stays invalid
    assert np.allclose(back, img, atol=1e-4)


def test_depth_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 5, size=(24, 32))
    p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    write_depth(p1, img)
    write_depth(p2, read_depth(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_depth_truncated_file_error(tmp_path):
    path = tmp_path / "d.pgm"
    write_depth(path, np.ones((4, 4)))
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(InputError) as err:
        read_depth(path)
    assert "27" in str(err.value) and "32" in str(err.value)


def test_depth_wrong_maxval_error(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(8))
    with pytest.raises(InputError) as err:
        read_depth(path)
    assert "maxval" in str(err.value)


def test_depth_bad_magic_error(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(b"P6\n2 2\n65535\n" + bytes(8))
    with pytest.raises(InputError):
        read_depth(path)


# -- trajectories ----------------------------------------------------------------

def test_trajectory_identity_line(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# comment\n0.0 0 0 0 0 0 0 1\n")
    out = read_trajectory(path)
    assert len(out) == 1
    ts, pose = out[0]
    assert ts == 0.0
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, 0.0)


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    poses = []
    for i in range(5):
        from scipy.spatial.transform import Rotation
        rot = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        poses.append((float(i) * 0.1, Pose(rot, rng.normal(size=3))))
    path = tmp_path / "t.txt"
    write_trajectory(path, poses)
    back = read_trajectory(path)
    assert [ts for ts, _ in back] == [ts for ts, _ in poses]
    for (_, a), (_, b) in zip(poses, back):
        assert np.allclose(a.rotation, b.rotation, atol=1e-9)
        assert np.allclose(a.translation, b.translation, atol=1e-12)


def test_trajectory_requires_monotonic_timestamps(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0.0 0 0 0 0 0 0 1\n"
                    "2.0 0 0 0 0 0 0 1\n"
                    "1.0 0 0 0 0 0 0 1\n")
    with pytest.raises(InputError) as err:
        read_trajectory(path)
    assert ":3" in str(err.value)


def test_trajectory_normalises_quaternion(tmp_path, caplog):
    path = tmp_path / "t.txt"
    path.write_text("0.0 0 0 0 0 0 0 1.01\n")
    with caplog.at_level("WARNING"):
        out = read_trajectory(path)
    assert "normalising" in caplog.text
    assert np.allclose(out[0][1].rotation, np.eye(3), atol=1e-9)


def test_trajectory_bad_line_numbered(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("0.0 0 0 0 0 0 0 1\nnot a pose\n")
    with pytest.raises(InputError) as err:
        read_trajectory(path)
    assert ":2" in str(err.value)


def test_intrinsics_roundtrip(tmp_path):
    intr = Intrinsics(75.0, 76.5, 47.5, 35.5, 96, 72)
    path = tmp_path / "i.txt"
    write_intrinsics(path, intr)
    assert read_intrinsics(path) == intr


# -- synthetic scenes --------------------------------------------------------------

def test_synth_plane_center_depth():
    spec = SceneSpec(scene="plane", plane_normal=(0, 0, -1), plane_offset=-1.0,
                     width=64, height=48, fx=64.0, fy=64.0,
                     cx=32.0, cy=24.0)
    pose = static_pose((0, 0, 0), (0, 0, 1))
    depth = render_depth(spec, pose)
    assert depth[24, 32] == pytest.approx(1.0, abs=1e-4)


def test_synth_sphere_center_depth():
    spec = SceneSpec(scene="sphere", sphere_center=(0, 0, 1.5), sphere_radius=0.5,
                     width=64, height=48, fx=64.0, fy=64.0, cx=32.0, cy=24.0)
    pose = static_pose((0, 0, 0), (0, 0, 1))
    depth = render_depth(spec, pose)
    assert depth[24, 32] == pytest.approx(1.0, abs=1e-4)


def test_synth_sequence_deterministic(tmp_path):
    spec = SceneSpec(scene="sphere", sphere_radius=0.4, frames=3,
                     width=32, height=24, fx=30.0, fy=30.0, seed=9,
                     noise_sigma=0.002)
    d1, d2 = tmp_path / "a", tmp_path / "b"
    synth_sequence(spec, d1)
    synth_sequence(spec, d2)
    for p1 in sorted(d1.rglob("*")):
        if p1.is_file():
            p2 = d2 / p1.relative_to(d1)
            assert p1.read_bytes() == p2.read_bytes()


def test_synth_reconstruction_accuracy(wall_scene):
    # fused synthetic output stays within half a cube of the true surface
    spec, pose, depth = wall_scene
    l = 0.02
    engine = Engine(RunConfig(cube_size=l, strategy="serial", workers=1),
                    spec.intrinsics())
    for _ in range(3):
        engine.fuse_frame(depth, pose)
    mesh = engine.compact()
    dist = np.abs(mesh.positions[:, 2] - 1.0)
    assert np.sqrt((dist ** 2).mean()) <= 0.5 * l


# -- mesh export ----------------------------------------------------------------

def _single_triangle_mesh():
    return CompactMesh(
        positions=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        normals=np.array([[0.0, 0, 1], [0, 0, 1], [0, 0, 1]]),
        ages=np.array([0, 1, 2], dtype=np.int64),
        indices=np.array([[0, 1, 2]], dtype=np.int32),
    )


def test_obj_single_triangle(tmp_path):
    path = tmp_path / "m.obj"
    write_obj(path, _single_triangle_mesh())
    lines = path.read_text().splitlines()
    assert sum(1 for ln in lines if ln.startswith("v ")) == 3
    assert sum(1 for ln in lines if ln.startswith("vn ")) == 3
    faces = [ln for ln in lines if ln.startswith("f ")]
    assert faces == ["f 1//1 2//2 3//3"]


def test_obj_shared_pair(tmp_path):
    mesh = CompactMesh(
        positions=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]),
        normals=np.tile([0.0, 0, 1], (4, 1)),
        ages=np.zeros(4, dtype=np.int64),
        indices=np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int32),
    )
    path = tmp_path / "m.obj"
    write_obj(path, mesh)
    lines = path.read_text().splitlines()
    assert sum(1 for ln in lines if ln.startswith("v ")) == 4
    assert sum(1 for ln in lines if ln.startswith("f ")) == 2


def test_obj_rejects_bad_indices(tmp_path):
    mesh = _single_triangle_mesh()
    mesh.indices = np.array([[0, 1, 7]], dtype=np.int32)
    with pytest.raises(InputError):
        write_obj(tmp_path / "m.obj", mesh)


def test_ply_header_and_size_arithmetic(tmp_path):
    mesh = _single_triangle_mesh()
    path = tmp_path / "m.ply"
    write_ply(path, mesh, mesh.ages)
    data = path.read_bytes()
    header_end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:header_end].decode("ascii")
    assert "element vertex 3" in header
    assert "element face 1" in header
    # 3 vertices * (6 floats + 3 uchar) + 1 face * (1 uchar + 3 int32)
    assert len(data) == header_end + 3 * (24 + 3) + 1 * (1 + 12)


def test_ply_empty_mesh(tmp_path):
    mesh = CompactMesh(np.zeros((0, 3)), np.zeros((0, 3)),
                       np.zeros(0, dtype=np.int64), np.zeros((0, 3), np.int32))
    path = tmp_path / "m.ply"
    write_ply(path, mesh)
    data = path.read_bytes()
    assert b"element vertex 0" in data
    assert data.endswith(b"end_header\n")


def test_age_colormap_endpoints():
    colors = age_colors(np.array([0, 5, 10]))
    assert tuple(colors[0]) == (0, 0, 255)       # newest: blue
    assert tuple(colors[-1]) == (255, 0, 0)      # oldest: red


# -- stats CSV ----------------------------------------------------------------

def _row(i):
    return StatsRow(frame=i, blocks_active=10 + i, vertices_live=100,
                    triangles_live=190, vertices_allocated_total=120,
                    vertices_recycled_total=5, irregular_cube_count=2,
                    fusion_ms=1.5, meshing_ms=2.5, compact_ms=0.0)


def test_stats_empty_run(tmp_path):
    path = tmp_path / "s.csv"
    write_stats(path, [])
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",") == list(StatsRow.FIELDS)


def test_stats_three_frames(tmp_path):
    path = tmp_path / "s.csv"
    write_stats(path, [_row(i) for i in range(3)])
    text = path.read_text()
    assert len(text.splitlines()) == 4
    assert "\r" not in text


def test_stats_roundtrip(tmp_path):
    rows = [_row(i) for i in range(3)]
    path = tmp_path / "s.csv"
    write_stats(path, rows)
    with open(path, newline="") as f:
        back = list(csv.DictReader(f))
    for r, b in zip(rows, back):
        assert int(b["frame"]) == r.frame
        assert int(b["blocks_active"]) == r.blocks_active
        assert float(b["meshing_ms"]) == r.meshing_ms
