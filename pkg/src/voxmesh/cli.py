"""Command-line harness: reconstruct, compare, synth, export.

Exit codes: 0 success, 1 usage error, 2 input error, 3 capacity error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io_formats, synth
from .engine import Engine, RunConfig
from .errors import CapacityError, InputError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_CAPACITY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cube-size", type=float, default=0.03,
                   help="cube side length in metres (default 0.03)")
    p.add_argument("--trunc", type=float, default=None,
                   help="truncation band in metres (default 3x cube size)")
    p.add_argument("--epsilon", type=float, default=0.1,
                   help="refinement corner threshold, normalised tsdf units")
    refine = p.add_mutually_exclusive_group()
    refine.add_argument("--refine", dest="refine", action="store_true")
    refine.add_argument("--no-refine", dest="refine", action="store_false")
    p.set_defaults(refine=False)
    p.add_argument("--strategy", choices=("serial", "claim", "partition"),
                   default="claim")
    p.add_argument("--baseline", action="store_true",
                   help="also report loose (no-sharing) vertex counts")
    p.add_argument("--max-range", type=float, default=5.0)
    p.add_argument("--frustum-only", action="store_true",
                   help="mesh only blocks visible to the current camera")
    p.add_argument("--workers", type=int, default=0,
                   help="worker threads (0 = hardware parallelism)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-scale", type=float, default=5000.0,
                   help="raw-to-metre divisor of depth PGMs (default 5000)")
    p.add_argument("--out", type=Path, required=True)


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        cube_size=args.cube_size,
        trunc=args.trunc,
        epsilon=args.epsilon,
        refine=args.refine,
        strategy=args.strategy,
        baseline=args.baseline,
        max_range=args.max_range,
        frustum_only=args.frustum_only,
        workers=args.workers,
        seed=args.seed,
    )


def _load_dataset(dataset_dir: Path):
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise InputError(f"dataset directory {dataset_dir} not found")
    depth_files = sorted((dataset_dir / "depth").glob("*.pgm"))
    traj_path = dataset_dir / "trajectory.txt"
    intr_path = dataset_dir / "intrinsics.txt"
    if not traj_path.exists():
        raise InputError(f"{traj_path} missing")
    if not intr_path.exists():
        raise InputError(f"{intr_path} missing")
    poses = io_formats.read_trajectory(traj_path)
    if len(depth_files) != len(poses):
        raise InputError(f"{len(depth_files)} depth frames but {len(poses)} poses")
    intr = io_formats.read_intrinsics(intr_path)
    return depth_files, [p for _, p in poses], intr


def _dataset_hash(dataset_dir: Path) -> str:
    """Content hash over every dataset file, in blob style (path + bytes)."""
    digest = hashlib.sha1()
    for path in sorted(Path(dataset_dir).rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            digest.update(f"{path.relative_to(dataset_dir)}\0{len(data)}\0".encode())
            digest.update(data)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, config: RunConfig, dataset_dir: Path,
                    frames: int) -> None:
    manifest = {
        "config": config.resolved().to_dict(),
        "dataset": str(dataset_dir),
        "dataset_sha1": _dataset_hash(dataset_dir),
        "frames": frames,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


def _run_reconstruction(config: RunConfig, dataset_dir: Path, depth_scale: float,
                        progress: bool = True) -> Engine:
    depth_files, poses, intr = _load_dataset(dataset_dir)
    engine = Engine(config, intr)
    t0 = time.perf_counter()
    for i, (df, pose) in enumerate(zip(depth_files, poses)):
        depth = io_formats.read_depth(df, depth_scale)
        row = engine.fuse_frame(depth, pose)
        if progress and (i % 20 == 0 or i == len(depth_files) - 1):
            print(f"frame {i}: blocks={row.blocks_active} "
                  f"verts={row.vertices_live} tris={row.triangles_live}")
    if progress:
        print(f"reconstructed {len(depth_files)} frames "
              f"in {time.perf_counter() - t0:.2f}s")
    return engine


def cmd_reconstruct(args) -> int:
    config = _config_from_args(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    engine = _run_reconstruction(config, args.dataset, args.depth_scale)
    mesh = engine.compact()
    io_formats.write_obj(out / "mesh.obj", mesh)
    io_formats.write_ply(out / "mesh.ply", mesh, mesh.ages)
    io_formats.write_stats(out / "stats.csv", engine.stats)
    _write_manifest(out, config, args.dataset, len(engine.stats))
    print(f"mesh: {len(mesh.positions)} vertices, {len(mesh.indices)} triangles "
          f"-> {out / 'mesh.obj'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _config_from_args(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    engine = _run_reconstruction(config, args.dataset, args.depth_scale)
    rows = []
    for r in engine.stats:
        loose = 3 * r.triangles_live     # no-sharing baseline: 3 per triangle
        rows.append((r.frame, r.vertices_live, r.triangles_live, loose,
                     (r.vertices_live / loose) if loose else 1.0))
    with open(out / "compare.csv", "w", encoding="utf-8", newline="") as f:
        import csv
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "vertices_compact", "triangles",
                    "vertices_loose", "ratio"])
        w.writerows(rows)
    final = rows[-1] if rows else (0, 0, 0, 0, 1.0)
    print(f"final: compact={final[1]} loose={final[3]} ratio={final[4]:.4f}")
    _write_manifest(out, config, args.dataset, len(engine.stats))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = synth.SceneSpec(
        scene=args.scene,
        frames=args.frames,
        width=args.width,
        height=args.height,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    if args.scene == "plane":
        spec = synth.tilted_plane_spec(
            args.tilt_deg, distance=args.distance, frames=args.frames,
            width=args.width, height=args.height,
            noise_sigma=args.noise, seed=args.seed)
        # jitter the vantage slightly around the origin, looking at the plane
        spec.orbit_center = (0.0, 0.0, 0.0)
        spec.orbit_radius = 0.02
        spec.target = (0.0, 0.0, args.distance)
        spec.look = "inward"
    elif args.scene == "sphere":
        spec.sphere_radius = args.radius
        spec.orbit_radius = args.distance + args.radius
        spec.elevation_amp_deg = 35.0
    else:  # room
        spec.room_size = (args.room_size, args.room_size, args.room_size * 0.6)
        spec.orbit_radius = 0.25 * args.room_size
        spec.look = "outward"
    args.out.mkdir(parents=True, exist_ok=True)
    synth.synth_sequence(spec, args.out, args.depth_scale)
    n = len(list((args.out / "depth").glob("*.pgm")))
    print(f"wrote {n} frames to {args.out}")
    return EXIT_OK


def cmd_export(args) -> int:
    if not (args.obj or args.ply):
        raise InputError("nothing to export: pass --obj and/or --ply")
    config = _config_from_args(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    engine = _run_reconstruction(config, args.dataset, args.depth_scale,
                                 progress=False)
    mesh = engine.compact()
    if args.obj:
        io_formats.write_obj(out / "mesh.obj", mesh)
        print(f"wrote {out / 'mesh.obj'}")
    if args.ply:
        ages = mesh.ages if args.color == "age" else np.zeros(len(mesh.positions),
                                                              dtype=np.int64)
        io_formats.write_ply(out / "mesh.ply", mesh, ages)
        print(f"wrote {out / 'mesh.ply'}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="voxmesh",
                     description="Incremental TSDF-to-mesh reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="fuse a dataset and export the mesh")
    p.add_argument("dataset", type=Path)
    _add_run_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("compare", help="compact vs loose (no sharing) memory")
    p.add_argument("dataset", type=Path)
    _add_run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scene", choices=("plane", "sphere", "room"), default="plane")
    p.add_argument("--tilt-deg", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--room-size", type=float, default=4.0)
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth-scale", type=float, default=5000.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export", help="re-run a reconstruction and export meshes")
    p.add_argument("dataset", type=Path)
    _add_run_flags(p)
    p.add_argument("--obj", action="store_true")
    p.add_argument("--ply", action="store_true")
    p.add_argument("--color", choices=("age", "none"), default="none")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
