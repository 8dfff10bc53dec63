"""Virtual ring coordinates and the arc geometry used by routing and repair.

Every node owns one coordinate per ring space, a real in [0, 1) derived
deterministically from its 64-bit id. Coordinates wrap modulo 1; clockwise
is the direction of increasing coordinate. All functions here are pure.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

# 53 bits of a 64-bit digest, so every coordinate is an exactly representable
# double and derivation is identical on every platform.
_COORD_BITS = 53
_COORD_SCALE = float(2**_COORD_BITS)


def derive_coords(node_id: int, num_spaces: int) -> tuple[float, ...]:
    """Derive a node's coordinate vector, one coordinate per ring space.

    Coordinate i is a keyed hash of (node_id, i) mapped into [0, 1).
    The same inputs always produce the same vector.
    """
    if num_spaces < 1:
        raise ValueError(f"number of ring spaces must be >= 1, got {num_spaces}")
    if node_id < 0 or node_id >= 2**64:
        raise ValueError(f"node id must fit in 64 bits, got {node_id}")
    coords = []
    for i in range(num_spaces):
        digest = hashlib.blake2b(
            struct.pack(">QI", node_id, i), digest_size=8
        ).digest()
        bits = int.from_bytes(digest, "big") >> (64 - _COORD_BITS)
        coords.append(bits / _COORD_SCALE)
    return tuple(coords)


def circular_distance(x: float, y: float) -> float:
    """Length of the smaller arc between two ring positions; in [0, 0.5]."""
    d = x - y if x > y else y - x
    return 1.0 - d if d > 0.5 else d


def cw_arc_length(start: float, end: float) -> float:
    """Arc length travelling clockwise (increasing coordinate) from start to end."""
    return (end - start) % 1.0


def ccw_arc_length(start: float, end: float) -> float:
    """Arc length travelling counterclockwise (decreasing coordinate) from start to end."""
    return (start - end) % 1.0


def closest_of(candidates: Iterable[tuple[int, float]], target: float) -> int:
    """Id of the candidate closest to target on the ring.

    Distance ties break toward the smaller id, so the winner is unique
    for any candidate set.
    """
    best_id = -1
    best_d = 2.0
    found = False
    for nid, coord in candidates:
        d = circular_distance(coord, target)
        if d < best_d or (d == best_d and nid < best_id):
            best_d = d
            best_id = nid
        found = True
    if not found:
        raise ValueError("closest_of requires a non-empty candidate set")
    return best_id


def on_smaller_arc(
    a: float, b: float, x: float, a_id: int = 0, b_id: int = 1
) -> bool:
    """True iff x lies strictly inside the smaller arc between a and b.

    The smaller arc has length circular_distance(a, b). When a and b are
    exactly antipodal both arcs tie; the clockwise arc starting at the
    smaller-id endpoint is then designated the smaller one.
    """
    if a == b:
        raise ValueError("arc endpoints must be distinct coordinates")
    span = cw_arc_length(a, b)
    if span < 0.5:
        start, length = a, span
    elif span > 0.5:
        start, length = b, 1.0 - span
    else:
        start = a if a_id < b_id else b
        length = 0.5
    off = cw_arc_length(start, x)
    return 0.0 < off < length
