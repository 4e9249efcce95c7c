"""Hamming-distance cube-type refinement.

Cube types near a face-parallel split (the six "regular" types, two
coplanar triangles each) flicker when the surface passes close to a
corner: a tiny disturbance of the corner sample flips one bit of the
type and swaps the neat two-triangle layout for a fragmented one.  The
refiner detects that situation and snaps the type back to the nearest
regular type before triangulation, provided

  * the type moved at most 3 bits since the previous frame,
  * a regular type lies within 3 bits of the current type, and
  * every corner on which they disagree holds a near-zero sample
    (|tsdf| < epsilon).

The 3-bit radius is safe because regular types are pairwise 4 or 8 bits
apart, so no type is ever attracted to two different regular types at
the same minimal distance without an explicit tie rule (smallest
distance, then lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mc_tables import CORNER_OFFSETS

HAMMING_RADIUS = 3


def _derive_regular_types() -> tuple[int, ...]:
    out = []
    for axis in range(3):
        for side in (0, 1):
            bits = 0
            for k, off in enumerate(CORNER_OFFSETS):
                if off[axis] == side:
                    bits |= 1 << k
            out.append(bits)
    return tuple(out)


# Face-parallel split types, ordered (x-, x+, y-, y+, z-, z+).
REGULAR_TYPES = _derive_regular_types()

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)

# static self-check: every pair of regular types is 4 or 8 bits apart
for _i, _a in enumerate(REGULAR_TYPES):
    for _b in REGULAR_TYPES[_i + 1:]:
        assert int(_POPCOUNT[_a ^ _b]) in (4, 8)


@dataclass
class RefineParams:
    """epsilon is in normalised tsdf units, so it scales with cube size."""

    epsilon: float = 0.1
    enabled: bool = True


def hamming(a: int, b: int) -> int:
    """Number of differing bits between two 8-bit cube types."""
    return int(_POPCOUNT[(a ^ b) & 0xFF])


def detect_disturbance(t_curr: int, t_prev: int, corner_tsdf,
                       params: RefineParams):
    """Return the regular type to apply, or None.

    ``corner_tsdf`` holds the 8 corner samples of the cube in corner
    order.  All three gates must pass: temporal (t_curr within 3 bits of
    t_prev), proximity (a regular type within 3 bits of t_curr), and
    magnitude (every disagreeing corner has |tsdf| < epsilon).  Among
    qualifying regular types the closest wins, ties broken by lowest
    index.
    """
    if not params.enabled:
        return None
    if hamming(t_curr, t_prev) > HAMMING_RADIUS:
        return None
    corner_tsdf = np.asarray(corner_tsdf, dtype=np.float64)
    best = None
    best_dist = HAMMING_RADIUS + 1
    for j, reg in enumerate(REGULAR_TYPES):
        dist = hamming(t_curr, reg)
        if dist > HAMMING_RADIUS or dist >= best_dist:
            continue
        diff = t_curr ^ reg
        if all(abs(float(corner_tsdf[k])) < params.epsilon
               for k in range(8) if (diff >> k) & 1):
            best = reg
            best_dist = dist
    return best


def refine_block_types(type_curr: np.ndarray, type_prev: np.ndarray,
                       corner_tsdf: np.ndarray, defined: np.ndarray,
                       params: RefineParams) -> int:
    """Vectorised refinement over one block's cubes, in place.

    ``corner_tsdf`` is (8, B, B, B): sample at corner k of every cube.
    ``defined`` marks cubes whose 8 corners are all observed.  Returns
    the number of cubes rewritten.
    """
    if not params.enabled or not defined.any():
        return 0
    tc = type_curr.astype(np.int64)
    tp = type_prev.astype(np.int64)
    gate_temporal = _POPCOUNT[tc ^ tp] <= HAMMING_RADIUS
    candidates = defined & gate_temporal
    if not candidates.any():
        return 0

    small = np.abs(corner_tsdf) < params.epsilon      # (8, B, B, B)
    best_score = np.full(tc.shape, 255, dtype=np.int64)
    best_type = np.zeros_like(tc)
    for j, reg in enumerate(REGULAR_TYPES):
        diff = tc ^ reg
        dist = _POPCOUNT[diff]
        ok = candidates & (dist <= HAMMING_RADIUS)
        if not ok.any():
            continue
        for k in range(8):
            bit = (diff >> k) & 1
            ok &= (bit == 0) | small[k]
        score = dist * 8 + j                          # distance first, then index
        better = ok & (score < best_score)
        best_score[better] = score[better]
        best_type[better] = reg
    hit = best_score < 255
    changed = hit & (tc != best_type)
    type_curr[hit] = best_type[hit].astype(np.uint8)
    return int(np.count_nonzero(changed))


def apply_refinement(block, local: tuple[int, int, int], regular_type: int) -> None:
    """Overwrite one cube's current type with the detected regular type."""
    block.type_curr[local] = regular_type
