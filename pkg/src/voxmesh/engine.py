"""Frame-by-frame reconstruction driver.

``Engine`` owns the spatial store and applies the full pipeline to each
incoming depth frame: collect blocks along the measurement band,
integrate TSDF samples, then retype/re-mesh the affected blocks.  It
also produces per-frame statistics rows and can audit the structural
invariants (reference counts, slot uniqueness, pool conservation) after
any frame.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import fusion, mesher
from .errors import ConsistencyError
from .fusion import DepthFrame, Intrinsics, Pose
from .refine import REGULAR_TYPES, RefineParams
from .store import CompactMesh, SpatialStore


@dataclass
class RunConfig:
    cube_size: float = 0.03
    trunc: Optional[float] = None        # defaults to 3 * cube_size
    epsilon: float = 0.1
    refine: bool = False
    strategy: str = "claim"
    baseline: bool = False
    max_range: float = 5.0
    frustum_only: bool = False
    workers: int = 0                     # 0 = hardware parallelism
    seed: int = 0
    weight_cap: int = 128
    max_vertices: Optional[int] = None
    table_size: int = 1 << 20

    def resolved(self) -> "RunConfig":
        cfg = replace(self)
        if cfg.trunc is None:
            cfg.trunc = 3.0 * cfg.cube_size
        if cfg.trunc < cfg.cube_size:
            raise ValueError("truncation band must be at least one cube")
        if cfg.workers <= 0:
            cfg.workers = os.cpu_count() or 1
        if cfg.strategy not in mesher.STRATEGIES:
            raise ValueError(f"unknown strategy {cfg.strategy!r}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "cube_size": self.cube_size,
            "trunc": self.trunc,
            "epsilon": self.epsilon,
            "refine": self.refine,
            "strategy": self.strategy,
            "baseline": self.baseline,
            "max_range": self.max_range,
            "frustum_only": self.frustum_only,
            "workers": self.workers,
            "seed": self.seed,
            "weight_cap": self.weight_cap,
        }


@dataclass
class StatsRow:
    frame: int
    blocks_active: int
    vertices_live: int
    triangles_live: int
    vertices_allocated_total: int
    vertices_recycled_total: int
    irregular_cube_count: int
    fusion_ms: float
    meshing_ms: float
    compact_ms: float

    FIELDS = ("frame", "blocks_active", "vertices_live", "triangles_live",
              "vertices_allocated_total", "vertices_recycled_total",
              "irregular_cube_count", "fusion_ms", "meshing_ms", "compact_ms")


@dataclass
class AuditReport:
    vertices_live: int
    triangles_live: int
    refcount_mismatches: int
    duplicate_handles: int
    zero_ref_live: int
    conservation_ok: bool

    @property
    def ok(self) -> bool:
        return (self.refcount_mismatches == 0 and self.duplicate_handles == 0
                and self.zero_ref_live == 0 and self.conservation_ok)


_REGULAR_MASK = np.zeros(256, dtype=bool)
_REGULAR_MASK[list(REGULAR_TYPES)] = True


class Engine:
    def __init__(self, config: RunConfig, intrinsics: Intrinsics,
                 audit_every_frame: bool = False):
        self.config = config.resolved()
        self.intrinsics = intrinsics
        self.store = SpatialStore(self.config.cube_size,
                                  table_size=self.config.table_size,
                                  max_vertices=self.config.max_vertices)
        self.frame_index = 0
        self.stats: list[StatsRow] = []
        self.audit_every_frame = audit_every_frame
        self.last_collected: list[tuple[int, int, int]] = []

    # -- per-frame pipeline ---------------------------------------------

    def fuse_frame(self, depth: np.ndarray, pose: Pose) -> StatsRow:
        cfg = self.config
        frame = DepthFrame(np.asarray(depth, dtype=np.float64), self.frame_index)

        t0 = time.perf_counter()
        collected = fusion.collect_blocks(self.store, frame, pose, self.intrinsics,
                                          cfg.trunc, cfg.max_range)
        fusion.integrate_frame(self.store, collected, frame, pose, self.intrinsics,
                               cfg.trunc, cfg.max_range, cfg.weight_cap)
        t1 = time.perf_counter()

        scope = mesher.meshing_scope(self.store, collected)
        if cfg.frustum_only:
            scope = [(c, m) for c, m in scope
                     if fusion.block_in_frustum(c, pose, self.intrinsics,
                                                self.store.block_extent)]
        refine_params = RefineParams(epsilon=cfg.epsilon, enabled=cfg.refine)
        mesher.extract_frame(self.store, scope, self.frame_index,
                             strategy=cfg.strategy, workers=cfg.workers,
                             refine_params=refine_params,
                             halo=mesher.fused_halo(self.store, collected))
        t2 = time.perf_counter()

        self.last_collected = collected
        row = StatsRow(
            frame=self.frame_index,
            blocks_active=self.store.block_count,
            vertices_live=self.store.vertices.live_count,
            triangles_live=self.store.triangles.live_count,
            vertices_allocated_total=self.store.vertices.count,
            vertices_recycled_total=self.store.vertices.recycled_total,
            irregular_cube_count=self.irregular_cube_count(),
            fusion_ms=(t1 - t0) * 1e3,
            meshing_ms=(t2 - t1) * 1e3,
            compact_ms=0.0,
        )
        self.stats.append(row)
        self.frame_index += 1
        if self.audit_every_frame:
            report = self.audit()
            if not report.ok:
                raise ConsistencyError(f"frame {row.frame} audit failed: {report}")
        return row

    # -- derived quantities ----------------------------------------------

    def irregular_cube_count(self) -> int:
        """Cubes holding triangles whose type is outside the regular family."""
        total = 0
        for blk in self.store.blocks():
            has_tri = (blk.triangles >= 0).any(axis=3)
            if has_tri.any():
                total += int(np.count_nonzero(has_tri & ~_REGULAR_MASK[blk.type_curr]))
        return total

    def compact(self) -> CompactMesh:
        t0 = time.perf_counter()
        mesh = self.store.compact_mesh(self.frame_index)
        if self.stats:
            self.stats[-1].compact_ms = (time.perf_counter() - t0) * 1e3
        return mesh

    # -- invariants --------------------------------------------------------

    def audit(self) -> AuditReport:
        """Full-scan structural audit.

        Recounts every vertex's incident live triangles and compares with
        the pool's reference counts; checks that every live vertex is
        bound to exactly one edge slot and that arena accounting
        conserves (allocated == live + free).
        """
        pool = self.store.vertices
        tpool = self.store.triangles
        tally = np.zeros(max(pool.count, 1), dtype=np.int64)
        tri_rows = 0
        handle_rows = []
        for blk in self.store.blocks():
            tr = blk.triangles.reshape(-1)
            th = tr[tr >= 0]
            if th.size:
                verts = tpool.vertices[th].reshape(-1)
                tally += np.bincount(verts, minlength=tally.size)
                tri_rows += th.size
            ev = blk.edge_vertex.reshape(-1)
            occ = ev[ev >= 0]
            if occ.size:
                handle_rows.append(occ)
        handles = (np.concatenate(handle_rows) if handle_rows
                   else np.zeros(0, dtype=np.int64))
        mismatches = int(np.count_nonzero(tally[:pool.count] != pool.refcount[:pool.count]))
        duplicates = int(handles.size - np.unique(handles).size)
        live_from_slots = int(handles.size)
        zero_ref_live = int(np.count_nonzero(pool.alive[:pool.count]
                                             & (pool.refcount[:pool.count] == 0)))
        conservation = (pool.live_count == live_from_slots
                        and pool.count == pool.live_count + len(pool.free)
                        and int(pool.alive[:pool.count].sum()) == pool.live_count
                        and tpool.live_count == tri_rows
                        and int(tpool.alive[:tpool.count].sum()) == tpool.live_count)
        return AuditReport(
            vertices_live=pool.live_count,
            triangles_live=tpool.live_count,
            refcount_mismatches=mismatches,
            duplicate_handles=duplicates,
            zero_ref_live=zero_ref_live,
            conservation_ok=bool(conservation),
        )
