"""Two-level spatial hash of blocks and cubes, plus pooled mesh storage.

Space is carved into blocks of ``BLOCK_SIZE``^3 cubes.  Blocks live in an
open-addressed hash table keyed by their integer coordinate; cubes inside
a block are dense numpy arrays.  Each cube stores one TSDF corner sample,
three edge-vertex slots (for the +x/+y/+z edges leaving its corner) and
up to five triangle handles.  Vertices and triangles are kept in growable
arenas with LIFO free lists so recycled slots are reused before the arena
grows.

Hashing: ``h(x, y, z) = (x*P1 ^ y*P2 ^ z*P3) mod table_size`` with the
classic spatial-hash primes P1=73856093, P2=19349669, P3=83492791 and a
table of 2^20 entries by default.  Collisions are resolved by linear
probing with a stored-coordinate check; blocks are never evicted.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .errors import CapacityError, ConsistencyError

BLOCK_SIZE = 8
CUBES_PER_BLOCK = BLOCK_SIZE ** 3

HASH_P1 = 73856093
HASH_P2 = 19349669
HASH_P3 = 83492791
DEFAULT_TABLE_SIZE = 1 << 20

# Packed-key encoding: each signed coordinate is offset into 21 bits.
_KEY_OFFSET = 1 << 20
_KEY_SPAN = 1 << 21


class Axis(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2


class EdgeKey(NamedTuple):
    """A geometric cube edge, named by its owning cube and axis.

    ``cube`` is the global cube coordinate (block*BLOCK_SIZE + local) of
    the cube whose minimal corner is the edge's minimal endpoint.
    """

    cube: tuple[int, int, int]
    axis: int


@dataclass
class Block:
    """One 8x8x8 brick of cubes.  Arrays are indexed [x, y, z]."""

    coord: tuple[int, int, int]
    tsdf: np.ndarray        # float64 (B,B,B), normalised to [-1, 1]
    weight: np.ndarray      # int32   (B,B,B), 0 = unobserved
    type_prev: np.ndarray   # uint8   (B,B,B)
    type_curr: np.ndarray   # uint8   (B,B,B)
    edge_vertex: np.ndarray # int32   (B,B,B,3), -1 = empty slot
    triangles: np.ndarray   # int32   (B,B,B,5), -1 = empty slot

    @classmethod
    def empty(cls, coord: tuple[int, int, int]) -> "Block":
        b = BLOCK_SIZE
        return cls(
            coord=coord,
            tsdf=np.zeros((b, b, b), dtype=np.float64),
            weight=np.zeros((b, b, b), dtype=np.int32),
            type_prev=np.zeros((b, b, b), dtype=np.uint8),
            type_curr=np.zeros((b, b, b), dtype=np.uint8),
            edge_vertex=np.full((b, b, b, 3), -1, dtype=np.int32),
            triangles=np.full((b, b, b, 5), -1, dtype=np.int32),
        )


def hash_block(coord: tuple[int, int, int], table_size: int = DEFAULT_TABLE_SIZE) -> int:
    """Bucket index of a block coordinate; deterministic prime-multiply-xor."""
    x, y, z = coord
    return ((x * HASH_P1) ^ (y * HASH_P2) ^ (z * HASH_P3)) % table_size


def pack_coord(x: int, y: int, z: int) -> int:
    """Pack a block coordinate into a non-negative int64 key."""
    return (((x + _KEY_OFFSET) * _KEY_SPAN) + (y + _KEY_OFFSET)) * _KEY_SPAN + (z + _KEY_OFFSET)


class VertexPool:
    """Arena of vertex records with a LIFO free list.

    ``refcount[h]`` counts the live triangles referencing handle ``h``;
    a vertex is recycled exactly when that count returns to zero.  All
    mutating operations are serialised by one lock so allocate/free and
    the reference-count updates are linearizable.
    """

    def __init__(self, capacity_hint: int = 1024, max_vertices: Optional[int] = None):
        n = max(16, capacity_hint)
        self.position = np.zeros((n, 3), dtype=np.float64)
        self.normal = np.zeros((n, 3), dtype=np.float64)
        self.color = np.zeros((n, 3), dtype=np.float64)  # reserved, never written
        self.refcount = np.zeros(n, dtype=np.int64)
        self.birth_frame = np.zeros(n, dtype=np.int64)
        self.alive = np.zeros(n, dtype=bool)
        self.free: list[int] = []
        self.count = 0                 # arena high-water mark
        self.recycled_total = 0
        self.allocation_events = 0     # allocate() calls, incl. free-list reuse
        self.max_vertices = max_vertices
        self.lock = threading.Lock()

    def _grow(self, at_least: int) -> None:
        n = self.position.shape[0]
        new = n
        while new < at_least:
            new *= 2
        self.position = np.resize(self.position, (new, 3))
        self.normal = np.resize(self.normal, (new, 3))
        self.color = np.resize(self.color, (new, 3))
        self.refcount = np.resize(self.refcount, new)
        self.birth_frame = np.resize(self.birth_frame, new)
        alive = np.zeros(new, dtype=bool)
        alive[:n] = self.alive
        self.alive = alive

    def reserve(self, extra: int) -> None:
        """Guarantee room for ``extra`` more allocations without growing.

        Growing swaps the backing arrays, which is unsafe while other
        threads hold references to them; callers reserve before any
        parallel phase that may allocate.
        """
        with self.lock:
            need = self.count + extra
            if need > self.position.shape[0]:
                self._grow(need)

    def allocate(self, birth_frame: int = 0) -> int:
        with self.lock:
            if self.free:
                h = self.free.pop()
            else:
                if self.max_vertices is not None and self.count >= self.max_vertices:
                    raise CapacityError(
                        f"vertex pool exhausted ({self.max_vertices} vertices)")
                if self.count >= self.position.shape[0]:
                    self._grow(self.count + 1)
                h = self.count
                self.count += 1
            self.allocation_events += 1
            self.alive[h] = True
            self.refcount[h] = 0
            self.birth_frame[h] = birth_frame
            self.normal[h] = 0.0
            return h

    def release(self, h: int) -> None:
        with self.lock:
            if not self.alive[h]:
                raise ConsistencyError(f"double free of vertex handle {h}")
            if self.refcount[h] != 0:
                raise ConsistencyError(
                    f"freeing vertex {h} with refcount {self.refcount[h]}")
            self.alive[h] = False
            self.free.append(h)
            self.recycled_total += 1

    def incref(self, h: int) -> None:
        with self.lock:
            self.refcount[h] += 1

    def decref(self, h: int) -> None:
        with self.lock:
            self.refcount[h] -= 1
            if self.refcount[h] < 0:
                raise ConsistencyError(f"negative refcount on vertex {h}")

    @property
    def live_count(self) -> int:
        return self.count - len(self.free)


class TrianglePool:
    """Arena of vertex-handle triples with a LIFO free list."""

    def __init__(self, capacity_hint: int = 1024):
        n = max(16, capacity_hint)
        self.vertices = np.full((n, 3), -1, dtype=np.int64)
        self.alive = np.zeros(n, dtype=bool)
        self.free: list[int] = []
        self.count = 0
        self.recycled_total = 0
        self.lock = threading.Lock()

    def _grow(self, at_least: int) -> None:
        n = self.vertices.shape[0]
        new = n
        while new < at_least:
            new *= 2
        self.vertices = np.resize(self.vertices, (new, 3))
        alive = np.zeros(new, dtype=bool)
        alive[:n] = self.alive
        self.alive = alive

    def reserve(self, extra: int) -> None:
        with self.lock:
            need = self.count + extra
            if need > self.vertices.shape[0]:
                self._grow(need)

    def allocate(self, v0: int, v1: int, v2: int) -> int:
        with self.lock:
            if self.free:
                h = self.free.pop()
            else:
                if self.count >= self.vertices.shape[0]:
                    self._grow(self.count + 1)
                h = self.count
                self.count += 1
            self.vertices[h] = (v0, v1, v2)
            self.alive[h] = True
            return h

    def release(self, h: int) -> None:
        with self.lock:
            if not self.alive[h]:
                raise ConsistencyError(f"double free of triangle handle {h}")
            self.alive[h] = False
            self.free.append(h)
            self.recycled_total += 1

    @property
    def live_count(self) -> int:
        return self.count - len(self.free)


@dataclass
class CompactMesh:
    """Contiguous arrays of the live mesh with remapped indices."""

    positions: np.ndarray   # float64 (V, 3)
    normals: np.ndarray     # float64 (V, 3)
    ages: np.ndarray        # int64 (V,), frames since each vertex was born
    indices: np.ndarray     # int32 (T, 3)


class SpatialStore:
    """Block hash table plus vertex/triangle pools for one reconstruction."""

    def __init__(self, cube_size: float, table_size: int = DEFAULT_TABLE_SIZE,
                 max_vertices: Optional[int] = None):
        if cube_size <= 0:
            raise ValueError("cube_size must be positive")
        self.cube_size = float(cube_size)
        self.block_extent = self.cube_size * BLOCK_SIZE
        self.table_size = int(table_size)
        self._keys = np.full(self.table_size, -1, dtype=np.int64)
        self._slots: list[Optional[Block]] = [None] * self.table_size
        self._blocks: dict[tuple[int, int, int], Block] = {}
        self._insert_lock = threading.Lock()
        self.block_allocations = 0
        self.vertices = VertexPool(max_vertices=max_vertices)
        self.triangles = TrianglePool()
        self.degenerate_interpolations = 0

    # -- block table ---------------------------------------------------

    def block_of_point(self, p) -> tuple[int, int, int]:
        """Block coordinate containing a world point (componentwise floor)."""
        q = np.floor(np.asarray(p, dtype=np.float64) / self.block_extent).astype(np.int64)
        return (int(q[0]), int(q[1]), int(q[2]))

    def get_block(self, coord: tuple[int, int, int]) -> Optional[Block]:
        key = pack_coord(*coord)
        i = hash_block(coord, self.table_size)
        keys = self._keys
        n = self.table_size
        for _ in range(n):
            k = keys[i]
            if k == key:
                return self._slots[i]
            if k == -1:
                return None
            i += 1
            if i == n:
                i = 0
        return None

    def get_or_allocate_block(self, coord: tuple[int, int, int]) -> Block:
        blk = self.get_block(coord)
        if blk is not None:
            return blk
        with self._insert_lock:
            blk = self.get_block(coord)          # re-check: somebody may have won
            if blk is not None:
                return blk
            if len(self._blocks) * 2 >= self.table_size:
                raise CapacityError(
                    f"block table full ({len(self._blocks)} blocks, size {self.table_size})")
            blk = Block.empty(coord)
            key = pack_coord(*coord)
            i = hash_block(coord, self.table_size)
            while self._keys[i] != -1:
                i += 1
                if i == self.table_size:
                    i = 0
            # publish the slot before the key so concurrent readers never
            # see a key without its block
            self._slots[i] = blk
            self._blocks[coord] = blk
            self._keys[i] = key
            self.block_allocations += 1
            return blk

    @property
    def block_count(self) -> int:
        return len(self._blocks)

    def blocks(self) -> Iterator[Block]:
        """All allocated blocks in sorted-coordinate order (deterministic)."""
        for coord in sorted(self._blocks):
            yield self._blocks[coord]

    def block_coords(self) -> list[tuple[int, int, int]]:
        return sorted(self._blocks)

    # -- cube addressing -----------------------------------------------

    @staticmethod
    def split_cube(cube: tuple[int, int, int]):
        """Global cube coordinate -> (block coordinate, local coordinate)."""
        x, y, z = cube
        return ((x // BLOCK_SIZE, y // BLOCK_SIZE, z // BLOCK_SIZE),
                (x % BLOCK_SIZE, y % BLOCK_SIZE, z % BLOCK_SIZE))

    def corner_sample(self, cube: tuple[int, int, int]) -> tuple[float, int]:
        """(tsdf, weight) stored at a cube's minimal corner; (0.0, 0) if absent."""
        bc, lc = self.split_cube(cube)
        blk = self.get_block(bc)
        if blk is None:
            return 0.0, 0
        return float(blk.tsdf[lc]), int(blk.weight[lc])

    def owner_of_edge(self, cube: tuple[int, int, int], edge_index: int) -> EdgeKey:
        """EdgeKey of one of a cube's 12 edges (edge indices per mc_tables)."""
        from .mc_tables import EDGE_AXIS, EDGE_OWNER_OFFSET
        off = EDGE_OWNER_OFFSET[edge_index]
        return EdgeKey((cube[0] + off[0], cube[1] + off[1], cube[2] + off[2]),
                       EDGE_AXIS[edge_index])

    def resolve_edge(self, key: EdgeKey) -> Optional[tuple[Block, tuple[int, int, int], int]]:
        """Locate the unique slot for an edge: (block, local cube, axis).

        Returns None when the owning block is absent; the caller decides
        whether that is an error or a reason to allocate.
        """
        bc, lc = self.split_cube(key.cube)
        blk = self.get_block(bc)
        if blk is None:
            return None
        return blk, lc, int(key.axis)

    def edge_vertex_handle(self, key: EdgeKey) -> int:
        """Vertex handle bound to an edge, or -1."""
        slot = self.resolve_edge(key)
        if slot is None:
            return -1
        blk, lc, axis = slot
        return int(blk.edge_vertex[lc][axis])

    # -- vertex/triangle pools (thin forwarding) -------------------------

    def allocate_vertex(self, birth_frame: int = 0) -> int:
        return self.vertices.allocate(birth_frame)

    def free_vertex(self, h: int) -> None:
        self.vertices.release(h)

    # -- compaction ------------------------------------------------------

    def compact_mesh(self, current_frame: int = 0) -> CompactMesh:
        """Copy the live mesh into contiguous arrays.

        Traversal is sorted by block coordinate, then cube x/y/z, then
        axis, so the output is identical for any insertion history and
        any worker count.  Every live vertex appears exactly once since
        each is bound to exactly one edge slot.
        """
        handles: list[int] = []
        tri_rows: list[np.ndarray] = []
        for blk in self.blocks():
            ev = blk.edge_vertex.reshape(-1)
            occ = ev[ev >= 0]
            if occ.size:
                handles.extend(int(h) for h in occ)
            tr = blk.triangles.reshape(-1)
            tocc = tr[tr >= 0]
            if tocc.size:
                tri_rows.append(self.triangles.vertices[tocc])
        if not handles:
            empty3 = np.zeros((0, 3), dtype=np.float64)
            return CompactMesh(empty3, empty3.copy(),
                               np.zeros(0, dtype=np.int64),
                               np.zeros((0, 3), dtype=np.int32))
        harr = np.array(handles, dtype=np.int64)
        remap = np.full(self.vertices.count, -1, dtype=np.int64)
        remap[harr] = np.arange(harr.size)
        positions = self.vertices.position[harr].copy()
        normals = self.vertices.normal[harr].copy()
        ages = current_frame - self.vertices.birth_frame[harr]
        if tri_rows:
            tv = np.concatenate(tri_rows, axis=0)
            indices = remap[tv].astype(np.int32)
            if (indices < 0).any():
                raise ConsistencyError("triangle references a vertex bound to no edge")
        else:
            indices = np.zeros((0, 3), dtype=np.int32)
        return CompactMesh(positions, normals, ages.astype(np.int64), indices)
