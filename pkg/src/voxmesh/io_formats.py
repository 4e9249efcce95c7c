"""Dataset and mesh file I/O.

Depth images are 16-bit binary PGM (P5, maxval 65535, big-endian
samples) holding depth in ``raw / depth_scale`` metres, raw 0 invalid.
Trajectories are whitespace-separated ``timestamp tx ty tz qx qy qz qw``
lines with ``#`` comments and strictly increasing timestamps.  Meshes
export as ASCII OBJ (v/vn/f) or binary little-endian PLY with a
per-vertex age colour ramp.  All readers fail loudly with located
errors; nothing loads partially.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InputError
from .fusion import Intrinsics, Pose
from .store import CompactMesh

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# depth images
# ---------------------------------------------------------------------------

def write_depth(path, depth_m: np.ndarray, depth_scale: float = 5000.0) -> None:
    depth_m = np.asarray(depth_m, dtype=np.float64)
    raw = np.clip(np.rint(depth_m * depth_scale), 0, 65535).astype(">u2")
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(raw.tobytes())


def read_depth(path, depth_scale: float = 5000.0) -> np.ndarray:
    """Depth image in metres; raw 0 maps to 0.0 (invalid)."""
    data = Path(path).read_bytes()

    def fail(msg: str, offset: int):
        raise InputError(f"{path}: {msg} (byte offset {offset})")

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("truncated header", start)
        return data[start:pos]

    magic = token()
    if magic != b"P5":
        fail(f"bad magic {magic!r}, expected P5", 0)
    try:
        w = int(token())
        h = int(token())
        maxval = int(token())
    except ValueError:
        fail("non-numeric header field", pos)
    if maxval != 65535:
        fail(f"maxval {maxval}, expected 65535", pos)
    pos += 1  # single whitespace after maxval
    expected = w * h * 2
    payload = data[pos:]
    if len(payload) != expected:
        fail(f"payload holds {len(payload)} bytes, expected {expected}", pos)
    raw = np.frombuffer(payload, dtype=">u2").reshape(h, w)
    return raw.astype(np.float64) / depth_scale


# ---------------------------------------------------------------------------
# trajectories and intrinsics
# ---------------------------------------------------------------------------

def write_trajectory(path, poses: list[tuple[float, Pose]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in poses:
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x y z w
            vals = [float(ts), *(float(v) for v in pose.translation),
                    *(float(v) for v in q)]
            f.write(" ".join(repr(v) for v in vals) + "\n")


def read_trajectory(path) -> list[tuple[float, Pose]]:
    out: list[tuple[float, Pose]] = []
    last_ts = None
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise InputError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            except ValueError as exc:
                raise InputError(f"{path}:{ln}: {exc}") from None
            if last_ts is not None and ts <= last_ts:
                raise InputError(f"{path}:{ln}: timestamps must increase "
                                 f"({ts} after {last_ts})")
            last_ts = ts
            q = np.array([qx, qy, qz, qw])
            norm = np.linalg.norm(q)
            if norm == 0:
                raise InputError(f"{path}:{ln}: zero quaternion")
            if abs(norm - 1.0) > 1e-3:
                log.warning("%s:%d: quaternion norm %.6f, normalising", path, ln, norm)
            q = q / norm
            rot = Rotation.from_quat(q).as_matrix()
            out.append((ts, Pose(rot, np.array([tx, ty, tz]))))
    return out


def write_intrinsics(path, intr: Intrinsics) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{float(intr.fx)!r} {float(intr.fy)!r} "
                f"{float(intr.cx)!r} {float(intr.cy)!r} "
                f"{int(intr.width)} {int(intr.height)}\n")


def read_intrinsics(path) -> Intrinsics:
    text = Path(path).read_text(encoding="utf-8").strip()
    parts = text.split()
    if len(parts) != 6:
        raise InputError(f"{path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if fx <= 0 or fy <= 0:
        raise InputError(f"{path}: focal lengths must be positive")
    return Intrinsics(fx, fy, cx, cy, w, h)


# ---------------------------------------------------------------------------
# mesh export
# ---------------------------------------------------------------------------

def write_obj(path, mesh: CompactMesh) -> None:
    _check_mesh(mesh)
    lines = []
    for p in mesh.positions:
        lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for t in mesh.indices:
        a, b, c = int(t[0]) + 1, int(t[1]) + 1, int(t[2]) + 1
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8", newline="\n")


def age_colors(ages: np.ndarray) -> np.ndarray:
    """Linear hue ramp, blue (new) to red (old), as uint8 RGB rows."""
    ages = np.asarray(ages, dtype=np.float64)
    peak = ages.max() if ages.size and ages.max() > 0 else 1.0
    hue = 240.0 * (1.0 - ages / peak)        # 240 deg = blue, 0 deg = red
    h6 = hue / 60.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    rgb = np.zeros((ages.size, 3), dtype=np.float64)
    # saturation and value pinned to 1
    rgb[i == 0] = np.stack([np.ones_like(f), f, np.zeros_like(f)], axis=1)[i == 0]
    rgb[i == 1] = np.stack([1.0 - f, np.ones_like(f), np.zeros_like(f)], axis=1)[i == 1]
    rgb[i == 2] = np.stack([np.zeros_like(f), np.ones_like(f), f], axis=1)[i == 2]
    rgb[i == 3] = np.stack([np.zeros_like(f), 1.0 - f, np.ones_like(f)], axis=1)[i == 3]
    rgb[i == 4] = np.stack([f, np.zeros_like(f), np.ones_like(f)], axis=1)[i == 4]
    rgb[i == 5] = np.stack([np.ones_like(f), np.zeros_like(f), 1.0 - f], axis=1)[i == 5]
    return np.rint(rgb * 255).astype(np.uint8)


def write_ply(path, mesh: CompactMesh, ages: np.ndarray | None = None) -> None:
    """Binary little-endian PLY; vertex colours encode age when given."""
    _check_mesh(mesh)
    n_v = len(mesh.positions)
    n_f = len(mesh.indices)
    colors = age_colors(ages if ages is not None else np.zeros(n_v))
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n_v}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {n_f}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vert = np.zeros(n_v, dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("rgb", "u1", 3)])
    if n_v:
        vert["xyz"] = mesh.positions.astype("<f4")
        vert["n"] = mesh.normals.astype("<f4")
        vert["rgb"] = colors
    face = np.zeros(n_f, dtype=[("n", "u1"), ("idx", "<i4", 3)])
    if n_f:
        face["n"] = 3
        face["idx"] = mesh.indices.astype("<i4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert.tobytes())
        f.write(face.tobytes())


def _check_mesh(mesh: CompactMesh) -> None:
    if len(mesh.indices) and (mesh.indices.max() >= len(mesh.positions)
                              or mesh.indices.min() < 0):
        raise InputError("mesh indices out of range")


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def write_stats(path, rows) -> None:
    from .engine import StatsRow

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(StatsRow.FIELDS)
        for r in rows:
            writer.writerow([getattr(r, name) for name in StatsRow.FIELDS])
