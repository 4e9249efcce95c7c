"""Incremental Marching Cubes over collected blocks.

Each frame runs fixed phases separated by barriers:

  1. cube typing (+ optional refinement): recompute the 8-bit corner-sign
     type of every cube in scope from the fused TSDF,
  2. vertex placement: bind one interpolated vertex to every edge the
     current types require, allocating lazily and updating in place,
  3. triangulation: rebuild triangles only where the type changed,
  4. garbage collection: recycle vertices whose reference count hit zero,
  5. normals: refresh vertex normals from the TSDF gradient.

Vertex sharing is correct under three interchangeable strategies:
``serial`` (one in-order pass), ``claim`` (threads race per edge slot,
first-winner allocates, everyone else reuses the handle), and
``partition`` (eight parity groups of cubes processed in separate
passes; no two cubes in a group can touch the same edge).  All three
produce bit-identical meshes because a vertex's position depends only on
the fused samples of its edge, never on who computed it.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .errors import ConsistencyError
from .mc_tables import (
    CORNER_OFFSETS,
    EDGE_AXIS,
    EDGE_END_CORNER,
    EDGE_OWNER_OFFSET,
    EDGE_START_CORNER,
    EDGE_TABLE,
    EDGE_TABLE_ARR,
    TRI_TABLE,
    mc_lookup,
)
from .refine import RefineParams, refine_block_types
from .store import BLOCK_SIZE, Block, SpatialStore

STRATEGIES = ("serial", "claim", "partition")

_POP12 = np.array([bin(i).count("1") for i in range(4096)], dtype=np.int64)

__all__ = [
    "STRATEGIES",
    "compute_cube_type",
    "mc_lookup",
    "interpolate_vertex",
    "place_vertices",
    "triangulate",
    "garbage_collect",
    "compute_normals",
    "extract_frame",
]


def _run_parallel(fn, items, workers: int) -> None:
    if workers <= 1 or len(items) <= 1:
        for it in items:
            fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# phase 1: cube typing
# ---------------------------------------------------------------------------

def _extended_samples(store: SpatialStore, blk: Block):
    """(B+1)^3 tsdf/weight arrays: this block plus its +face neighbours."""
    b = BLOCK_SIZE
    n = b + 1
    tsdf = np.zeros((n, n, n), dtype=np.float64)
    weight = np.zeros((n, n, n), dtype=np.int32)
    tsdf[:b, :b, :b] = blk.tsdf
    weight[:b, :b, :b] = blk.weight
    bx, by, bz = blk.coord
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if dx == dy == dz == 0:
                    continue
                nb = store.get_block((bx + dx, by + dy, bz + dz))
                if nb is None:
                    continue
                dst = tuple(slice(b, n) if d else slice(0, b) for d in (dx, dy, dz))
                src = tuple(slice(0, 1) if d else slice(0, b) for d in (dx, dy, dz))
                tsdf[dst] = nb.tsdf[src]
                weight[dst] = nb.weight[src]
    return tsdf, weight


def corner_field(store: SpatialStore, blk: Block):
    """Per-cube corner samples: (8, B, B, B) tsdf plus a defined mask."""
    ext_t, ext_w = _extended_samples(store, blk)
    b = BLOCK_SIZE
    corner_tsdf = np.empty((8, b, b, b), dtype=np.float64)
    defined = np.ones((b, b, b), dtype=bool)
    for k, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner_tsdf[k] = ext_t[ox:ox + b, oy:oy + b, oz:oz + b]
        defined &= ext_w[ox:ox + b, oy:oy + b, oz:oz + b] > 0
    return corner_tsdf, defined


def retype_block(store: SpatialStore, blk: Block,
                 refine_params: Optional[RefineParams] = None,
                 cube_mask: Optional[np.ndarray] = None):
    """Recompute cube types for one block (and refine them if asked).

    Cubes with any unobserved corner keep both stored types and their
    triangles untouched.  ``cube_mask`` limits the update to a subset of
    cubes (border slabs of blocks adjacent to fused ones).  Returns
    (selected, corner_tsdf, refined_count) where ``selected`` marks the
    cubes whose types were recomputed.
    """
    corner_tsdf, defined = corner_field(store, blk)
    if cube_mask is not None:
        defined = defined & cube_mask
    bits = np.zeros(defined.shape, dtype=np.uint8)
    for k in range(8):
        bits |= ((corner_tsdf[k] < 0).astype(np.uint8) << k)
    blk.type_prev[defined] = blk.type_curr[defined]
    blk.type_curr[defined] = bits[defined]
    refined = 0
    if refine_params is not None and refine_params.enabled:
        refined = refine_block_types(blk.type_curr, blk.type_prev,
                                     corner_tsdf, defined, refine_params)
    return defined, corner_tsdf, refined


def compute_cube_type(store: SpatialStore, cube: tuple[int, int, int]) -> Optional[int]:
    """Single-cube typing: gather the 8 corner samples and store the type.

    Returns None (and leaves the stored types alone) when any corner is
    unobserved.
    """
    values = []
    for off in CORNER_OFFSETS:
        d, w = store.corner_sample((cube[0] + off[0], cube[1] + off[1], cube[2] + off[2]))
        if w == 0:
            return None
        values.append(d)
    bits = 0
    for k, d in enumerate(values):
        if d < 0:
            bits |= 1 << k
    bc, lc = store.split_cube(cube)
    blk = store.get_block(bc)
    blk.type_prev[lc] = blk.type_curr[lc]
    blk.type_curr[lc] = bits
    return bits


# ---------------------------------------------------------------------------
# phase 2: vertex placement
# ---------------------------------------------------------------------------

def interpolate_vertex(d0: float, d1: float, p0, p1):
    """Zero crossing of the linear model through (p0, d0), (p1, d1).

    With equal signs the same expression extrapolates beyond the
    segment, which is exactly what refined cube types rely on.  The
    degenerate d0 == d1 case lands on the midpoint.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if d0 == d1:
        return 0.5 * (p0 + p1)
    return p0 + (d0 / (d0 - d1)) * (p1 - p0)


def _place_cube_edges(store: SpatialStore, blk: Block, corner_tsdf: np.ndarray,
                      x: int, y: int, z: int, frame_index: int,
                      claim_lock: Optional[threading.Lock]) -> None:
    mask = EDGE_TABLE[blk.type_curr[x, y, z]]
    if not mask:
        return
    pool = store.vertices
    l = store.cube_size
    bx, by, bz = blk.coord
    gx = bx * BLOCK_SIZE + x
    gy = by * BLOCK_SIZE + y
    gz = bz * BLOCK_SIZE + z
    for e in range(12):
        if not (mask >> e) & 1:
            continue
        off = EDGE_OWNER_OFFSET[e]
        axis = EDGE_AXIS[e]
        ox, oy, oz = gx + off[0], gy + off[1], gz + off[2]
        obx, oby, obz = ox // BLOCK_SIZE, oy // BLOCK_SIZE, oz // BLOCK_SIZE
        if (obx, oby, obz) == (bx, by, bz):
            owner = blk
        else:
            owner = store.get_block((obx, oby, obz))
            if owner is None:
                raise ConsistencyError(
                    f"edge owner block {(obx, oby, obz)} absent during placement")
        slot = owner.edge_vertex[ox % BLOCK_SIZE, oy % BLOCK_SIZE, oz % BLOCK_SIZE]
        h = slot[axis]
        if h < 0:
            if claim_lock is None:
                h = pool.allocate(frame_index)
                slot[axis] = h
            else:
                with claim_lock:
                    h = slot[axis]
                    if h < 0:
                        h = pool.allocate(frame_index)
                        slot[axis] = h
        d0 = corner_tsdf[EDGE_START_CORNER[e], x, y, z]
        d1 = corner_tsdf[EDGE_END_CORNER[e], x, y, z]
        if d0 == d1:
            param = 0.5
            store.degenerate_interpolations += 1   # diagnostic; racy is fine
        else:
            param = d0 / (d0 - d1)
        sx, sy, sz = CORNER_OFFSETS[EDGE_START_CORNER[e]]
        px = (gx + sx) * l
        py = (gy + sy) * l
        pz = (gz + sz) * l
        if axis == 0:
            px += param * l
        elif axis == 1:
            py += param * l
        else:
            pz += param * l
        pool.position[h, 0] = px
        pool.position[h, 1] = py
        pool.position[h, 2] = pz


def place_vertices(store: SpatialStore, blk: Block, defined: np.ndarray,
                   corner_tsdf: np.ndarray, frame_index: int,
                   claim_lock: Optional[threading.Lock] = None,
                   parity: Optional[int] = None) -> None:
    """Bind vertices for every edge required by this block's cube types.

    Existing vertices are positionally updated, never reallocated.  With
    ``claim_lock`` set, empty slots are claimed atomically (first caller
    allocates).  With ``parity`` set, only cubes of that 2x2x2 parity
    class are processed, which makes concurrent slot access disjoint by
    construction.
    """
    active = defined & (EDGE_TABLE_ARR[blk.type_curr] != 0)
    if parity is not None:
        b = BLOCK_SIZE
        px, py, pz = np.meshgrid(np.arange(b), np.arange(b), np.arange(b), indexing="ij")
        active = active & (((px & 1) | ((py & 1) << 1) | ((pz & 1) << 2)) == parity)
    for x, y, z in np.argwhere(active):
        _place_cube_edges(store, blk, corner_tsdf, int(x), int(y), int(z),
                          frame_index, claim_lock)


# ---------------------------------------------------------------------------
# phase 3: triangulation
# ---------------------------------------------------------------------------

def _edge_handle(store: SpatialStore, blk: Block, gx: int, gy: int, gz: int,
                 e: int) -> int:
    off = EDGE_OWNER_OFFSET[e]
    ox, oy, oz = gx + off[0], gy + off[1], gz + off[2]
    obc = (ox // BLOCK_SIZE, oy // BLOCK_SIZE, oz // BLOCK_SIZE)
    owner = blk if obc == blk.coord else store.get_block(obc)
    if owner is None:
        raise ConsistencyError(f"edge owner block {obc} absent during triangulation")
    h = int(owner.edge_vertex[ox % BLOCK_SIZE, oy % BLOCK_SIZE, oz % BLOCK_SIZE, e_axis(e)])
    if h < 0:
        raise ConsistencyError(
            f"edge {e} of cube {(gx, gy, gz)} has no vertex; placement incomplete")
    return h


def e_axis(e: int) -> int:
    return EDGE_AXIS[e]


def triangulate(store: SpatialStore, blk: Block, x: int, y: int, z: int) -> None:
    """Rebuild one cube's triangles if its type changed since last frame.

    Unchanged types keep their triangle handles (and the vertices'
    reference counts) untouched.  A changed type destroys the old
    triangles, decrementing each vertex once per lost triangle, then
    builds the new layout with matching increments.
    """
    if blk.type_curr[x, y, z] == blk.type_prev[x, y, z]:
        return
    tris = blk.triangles[x, y, z]
    vpool = store.vertices
    tpool = store.triangles
    for s in range(5):
        th = int(tris[s])
        if th < 0:
            continue
        va, vb, vc = (int(v) for v in tpool.vertices[th])
        tpool.release(th)
        vpool.decref(va)
        vpool.decref(vb)
        vpool.decref(vc)
        tris[s] = -1
    layout = TRI_TABLE[blk.type_curr[x, y, z]]
    if not layout:
        return
    bx, by, bz = blk.coord
    gx = bx * BLOCK_SIZE + x
    gy = by * BLOCK_SIZE + y
    gz = bz * BLOCK_SIZE + z
    for i, (e0, e1, e2) in enumerate(layout):
        h0 = _edge_handle(store, blk, gx, gy, gz, e0)
        h1 = _edge_handle(store, blk, gx, gy, gz, e1)
        h2 = _edge_handle(store, blk, gx, gy, gz, e2)
        tris[i] = tpool.allocate(h0, h1, h2)
        vpool.incref(h0)
        vpool.incref(h1)
        vpool.incref(h2)


def triangulate_block(store: SpatialStore, blk: Block, defined: np.ndarray) -> None:
    changed = defined & (blk.type_curr != blk.type_prev)
    for x, y, z in np.argwhere(changed):
        triangulate(store, blk, int(x), int(y), int(z))


# ---------------------------------------------------------------------------
# phase 4: garbage collection
# ---------------------------------------------------------------------------

def garbage_collect(store: SpatialStore, blocks) -> int:
    """Recycle unreferenced vertices bound to edges of the given blocks.

    Returns the number of vertices freed.
    """
    pool = store.vertices
    freed = 0
    for coord in blocks:
        blk = store.get_block(coord)
        if blk is None:
            continue
        flat = blk.edge_vertex.reshape(-1)
        occ_idx = np.nonzero(flat >= 0)[0]
        if occ_idx.size == 0:
            continue
        handles = flat[occ_idx]
        dead = pool.refcount[handles] == 0
        if not dead.any():
            continue
        flat[occ_idx[dead]] = -1
        for h in handles[dead]:
            pool.release(int(h))
            freed += 1
    return freed


# ---------------------------------------------------------------------------
# phase 5: normals
# ---------------------------------------------------------------------------

# The lookup tables wind triangles clockwise when viewed from the
# positive-tsdf side; flip face normals so the fallback matches the
# gradient convention (normals point from inside to outside).
FACE_NORMAL_FLIP = -1.0


def _stencil_samples(store: SpatialStore, blk: Block):
    """Samples over cube locals -1..9 on every axis (index = local + 1).

    Owned-edge endpoints span locals 0..8 and their gradient stencils
    reach one further step in any direction, possibly crossing into
    diagonal neighbour blocks.
    """
    b = BLOCK_SIZE
    n = b + 3
    tsdf = np.zeros((n, n, n), dtype=np.float64)
    weight = np.zeros((n, n, n), dtype=np.int32)
    tsdf[1:b + 1, 1:b + 1, 1:b + 1] = blk.tsdf
    weight[1:b + 1, 1:b + 1, 1:b + 1] = blk.weight
    windows = {-1: (slice(0, 1), slice(b - 1, b)),
               0: (slice(1, b + 1), slice(0, b)),
               1: (slice(b + 1, n), slice(0, 2))}
    bx, by, bz = blk.coord
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for oz in (-1, 0, 1):
                if ox == oy == oz == 0:
                    continue
                nb = store.get_block((bx + ox, by + oy, bz + oz))
                if nb is None:
                    continue
                (dx, sx), (dy, sy), (dz, sz) = windows[ox], windows[oy], windows[oz]
                tsdf[dx, dy, dz] = nb.tsdf[sx, sy, sz]
                weight[dx, dy, dz] = nb.weight[sx, sy, sz]
    return tsdf, weight


def _block_normals(store: SpatialStore, blk: Block) -> list[int]:
    """Gradient normals for every vertex bound to this block.

    Returns the handles that need the face-normal fallback (degenerate
    or under-observed gradients).
    """
    tsdf, weight = _stencil_samples(store, blk)
    pool = store.vertices
    fallback: list[int] = []
    axes = np.eye(3, dtype=np.intp)
    for axis in range(3):
        occ = np.argwhere(blk.edge_vertex[:, :, :, axis] >= 0)
        if occ.size == 0:
            continue
        handles = blk.edge_vertex[occ[:, 0], occ[:, 1], occ[:, 2], axis]
        c0 = occ + 1                        # +1: array pad offset
        c1 = c0 + axes[axis]
        d0 = tsdf[c0[:, 0], c0[:, 1], c0[:, 2]]
        d1 = tsdf[c1[:, 0], c1[:, 1], c1[:, 2]]
        denom = d0 - d1
        param = np.where(denom != 0, d0 / np.where(denom == 0, 1.0, denom), 0.5)
        grads = []
        valid = np.ones(len(occ), dtype=bool)
        for c in (c0, c1):
            g = np.empty((len(occ), 3), dtype=np.float64)
            for d in range(3):
                plus = c + axes[d]
                minus = c - axes[d]
                g[:, d] = (tsdf[plus[:, 0], plus[:, 1], plus[:, 2]]
                           - tsdf[minus[:, 0], minus[:, 1], minus[:, 2]])
                valid &= (weight[plus[:, 0], plus[:, 1], plus[:, 2]] > 0)
                valid &= (weight[minus[:, 0], minus[:, 1], minus[:, 2]] > 0)
            grads.append(g)
        g = (1.0 - param)[:, None] * grads[0] + param[:, None] * grads[1]
        norm = np.linalg.norm(g, axis=1)
        good = valid & (norm > 1e-12)
        if good.any():
            pool.normal[handles[good]] = g[good] / norm[good, None]
        fallback.extend(int(h) for h in handles[~good])
    return fallback


def compute_normals(store: SpatialStore, blocks) -> None:
    """Refresh normals of all vertices bound to the given blocks.

    Primary path: normalised central-difference TSDF gradient, blended
    between the owning edge's endpoints at the vertex's interpolation
    parameter.  Vertices whose gradient is degenerate or straddles
    unobserved samples fall back to the average of their incident
    triangle face normals.
    """
    fallback: set[int] = set()
    block_objs = []
    for coord in blocks:
        blk = store.get_block(coord)
        if blk is None:
            continue
        block_objs.append(blk)
        fallback.update(_block_normals(store, blk))
    if not fallback:
        return
    pool = store.vertices
    fb = np.fromiter(fallback, dtype=np.int64)
    needs = np.zeros(pool.count, dtype=bool)
    needs[fb] = True
    rows = []
    for blk in block_objs:
        tr = blk.triangles.reshape(-1)
        th = tr[tr >= 0]
        if th.size:
            rows.append(store.triangles.vertices[th])
    accum = np.zeros((pool.count, 3), dtype=np.float64)
    if rows:
        tv = np.concatenate(rows, axis=0)
        tv = tv[needs[tv].any(axis=1)]
        if tv.size:
            p = pool.position
            fn = np.cross(p[tv[:, 1]] - p[tv[:, 0]], p[tv[:, 2]] - p[tv[:, 0]])
            for k in range(3):
                np.add.at(accum, tv[:, k], fn)
    acc = accum[fb]
    norms = np.linalg.norm(acc, axis=1)
    good = norms > 1e-20
    pool.normal[fb[good]] = FACE_NORMAL_FLIP * acc[good] / norms[good, None]
    for h in fb[~good]:
        if not pool.normal[h].any():
            pool.normal[h] = (0.0, 0.0, 1.0)  # degenerate and never set: unit default


# ---------------------------------------------------------------------------
# per-frame orchestration
# ---------------------------------------------------------------------------

_MINUS_OFFSETS = tuple((i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)
                       if (i, j, k) != (0, 0, 0))
_BOX_OFFSETS = tuple((i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1)
                     for k in (-1, 0, 1))


def meshing_scope(store: SpatialStore, collected):
    """Cubes whose types may change after fusing ``collected`` blocks.

    Fused blocks are retyped in full.  A block one step in the minus
    direction sees changed corners only through its far face, so just
    the border slab(s) there are retyped.  Returns a sorted list of
    (block coord, cube mask or None for the whole block).
    """
    full = set()
    slabs: dict[tuple[int, int, int], np.ndarray] = {}
    for c in collected:
        if store.get_block(c) is not None:
            full.add(c)
    for c in collected:
        for off in _MINUS_OFFSETS:
            n = (c[0] - off[0], c[1] - off[1], c[2] - off[2])
            if n in full or store.get_block(n) is None:
                continue
            mask = slabs.get(n)
            if mask is None:
                mask = np.zeros((BLOCK_SIZE,) * 3, dtype=bool)
                slabs[n] = mask
            sl = tuple(slice(BLOCK_SIZE - 1, BLOCK_SIZE) if o else slice(None)
                       for o in off)
            mask[sl] = True
    out = [(c, None) for c in full]
    out.extend(slabs.items())
    out.sort(key=lambda item: item[0])
    return out


def fused_halo(store: SpatialStore, collected):
    """Allocated blocks within one step of a fused block (any direction).

    Vertex positions, normals, and reference counts can only change
    here: fusion writes corners in collected blocks only, and the
    gradient/ownership stencils reach at most one block over.
    """
    out = set()
    for c in collected:
        for off in _BOX_OFFSETS:
            n = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
            if n not in out and store.get_block(n) is not None:
                out.add(n)
    return sorted(out)


def extract_frame(store: SpatialStore, scope, frame_index: int,
                  strategy: str = "claim", workers: int = 1,
                  refine_params: Optional[RefineParams] = None,
                  halo=None) -> dict:
    """Run the five meshing phases over the given scope.

    ``scope`` is a list of (block coord, cube mask or None) pairs as
    produced by ``meshing_scope`` (optionally frustum-filtered);
    ``halo`` is the block set for garbage collection and normal
    refresh, defaulting to the scope blocks plus one step out.  Returns
    counters: cubes refined, vertices freed.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    items = [(store.get_block(c), mask) for c, mask in scope]
    items = [(b, m) for b, m in items if b is not None]
    if not items:
        return {"refined": 0, "freed": 0}
    par_workers = workers if strategy != "serial" else 1

    # phase 1: typing (+ refinement); per-block context kept for placement
    ctx: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}
    refined_counts: dict[tuple[int, int, int], int] = {}

    def _retype(item) -> None:
        blk, mask = item
        selected, corner_tsdf, refined = retype_block(store, blk, refine_params,
                                                      cube_mask=mask)
        ctx[blk.coord] = (selected, corner_tsdf)
        refined_counts[blk.coord] = refined

    _run_parallel(_retype, items, par_workers)

    # reserve pool headroom so arenas never grow inside a parallel phase
    new_vertex_bound = 0
    changed_cubes = 0
    for blk, _ in items:
        selected, _ = ctx[blk.coord]
        masks = EDGE_TABLE_ARR[blk.type_curr[selected]]
        new_vertex_bound += int(_POP12[masks].sum())
        changed_cubes += int(np.count_nonzero(
            selected & (blk.type_curr != blk.type_prev)))
    store.vertices.reserve(new_vertex_bound)
    store.triangles.reserve(changed_cubes * 5)

    # phase 2: placement
    if strategy == "serial":
        for blk, _ in items:
            selected, corner_tsdf = ctx[blk.coord]
            place_vertices(store, blk, selected, corner_tsdf, frame_index)
    elif strategy == "claim":
        claim_lock = threading.Lock()

        def _place(item) -> None:
            blk, _ = item
            selected, corner_tsdf = ctx[blk.coord]
            place_vertices(store, blk, selected, corner_tsdf, frame_index,
                           claim_lock=claim_lock)

        _run_parallel(_place, items, par_workers)
    else:  # partition: eight parity passes, conflict-free inside each
        for parity in range(8):
            def _place(item, parity=parity) -> None:
                blk, _ = item
                selected, corner_tsdf = ctx[blk.coord]
                place_vertices(store, blk, selected, corner_tsdf, frame_index,
                               parity=parity)

            _run_parallel(_place, items, par_workers)

    # phase 3: triangulation
    def _triangulate(item) -> None:
        blk, _ = item
        selected, _ = ctx[blk.coord]
        triangulate_block(store, blk, selected)

    _run_parallel(_triangulate, items, par_workers)

    # phases 4+5: garbage collection and normal refresh
    if halo is None:
        seen = set()
        for blk, _ in items:
            for off in _BOX_OFFSETS:
                c = (blk.coord[0] + off[0], blk.coord[1] + off[1],
                     blk.coord[2] + off[2])
                if c not in seen and store.get_block(c) is not None:
                    seen.add(c)
        halo = sorted(seen)
    freed = garbage_collect(store, halo)
    compute_normals(store, halo)
    return {"refined": sum(refined_counts.values()), "freed": freed}
