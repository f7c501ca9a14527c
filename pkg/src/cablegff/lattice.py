"""Finite boxes, slabs and cable geometry of Z^d.

Boxes are half-open products ``[lo_i, hi_i)`` with row-major vertex
indexing. Every undirected nearest-neighbour edge is stored once, oriented
from its lexicographically smaller endpoint. Points of the cable system are
addressed by an edge and a cable coordinate ``t`` in ``[0, 1/2]``, where
``t = 0`` is the edge's first endpoint and ``t = 1/2`` its second one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MAX_VERTICES = 2**34

__all__ = [
    "Box",
    "Edge",
    "CablePoint",
    "make_box",
    "slab_box",
    "edges",
    "edge_array",
    "edge_count",
    "cable_distance",
    "unit_directions",
]


@dataclass(frozen=True)
class Box:
    """Half-open box ``[lo, hi)`` in Z^d.

    Attributes
    ----------
    lo, hi : tuple of int
        Lower (inclusive) and upper (exclusive) corner.
    slab : tuple of bool, optional
        Marks the axes that play the role of the long (unbounded proxy)
        directions of a slab.
    """

    lo: tuple
    hi: tuple
    slab: Optional[tuple] = None

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box: lo={self.lo}, hi={self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return tuple(int(h - l) for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.int64)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.int64)

    def index(self, x) -> np.ndarray:
        """Row-major index of vertex coordinates (works on ``(..., d)`` arrays)."""
        x = np.asarray(x, dtype=np.int64)
        rel = x - self.lo_array
        return np.ravel_multi_index(np.moveaxis(rel, -1, 0), self.shape)

    def coords(self, idx) -> np.ndarray:
        """Inverse of :meth:`index`; returns an ``(..., d)`` integer array."""
        rel = np.unravel_index(np.asarray(idx, dtype=np.int64), self.shape)
        return np.stack(rel, axis=-1).astype(np.int64) + self.lo_array

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        return np.all((x >= self.lo_array) & (x < self.hi_array), axis=-1)

    def vertices(self) -> np.ndarray:
        """All vertices as an ``(N, d)`` array in index order."""
        return self.coords(np.arange(self.size))

    def center(self) -> tuple:
        return tuple(int((l + h - 1) // 2) for l, h in zip(self.lo, self.hi))

    def dilate(self, r: int) -> "Box":
        return Box(tuple(l - r for l in self.lo), tuple(h + r for h in self.hi), self.slab)

    def shift(self, v) -> "Box":
        return Box(tuple(int(l + a) for l, a in zip(self.lo, v)),
                   tuple(int(h + a) for h, a in zip(self.hi, v)), self.slab)

    def inner(self, margin) -> "Box":
        """Sub-box obtained by removing ``margin`` layers on every side."""
        m = np.broadcast_to(np.asarray(margin, dtype=np.int64), (self.dim,))
        return Box(tuple(int(l + a) for l, a in zip(self.lo, m)),
                   tuple(int(h - a) for h, a in zip(self.hi, m)), self.slab)

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi),
                "slab": None if self.slab is None else list(self.slab)}


@dataclass(frozen=True)
class Edge:
    """Undirected edge ``{x, x + e_axis}`` stored with ``x`` the smaller endpoint."""

    x: tuple
    axis: int

    @property
    def y(self) -> tuple:
        y = list(self.x)
        y[self.axis] += 1
        return tuple(y)

    @property
    def direction(self) -> tuple:
        v = [0] * len(self.x)
        v[self.axis] = 1
        return tuple(v)


@dataclass(frozen=True)
class CablePoint:
    """Point ``x_e + t (y_e - x_e)`` of the cable system, ``t`` in cable length."""

    edge: Edge
    t: float
    box: Optional[Box] = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.t <= 0.5:
            raise ValueError(f"cable coordinate must lie in [0, 1/2], got {self.t}")

    def is_vertex(self) -> bool:
        return self.t == 0.0 or self.t == 0.5


def make_box(d: int, sides: Sequence[int], lo: Optional[Sequence[int]] = None) -> Box:
    """Build the box ``lo + [0, sides)``.

    Raises
    ------
    ValueError
        If ``d < 3`` (the walk must be transient), if a side is not
        positive, or if the vertex count is not addressable.
    """
    if d < 3:
        raise ValueError(f"dimension d={d} rejected: the model needs a transient walk (d >= 3)")
    sides = [int(s) for s in sides]
    if len(sides) != d:
        raise ValueError(f"expected {d} sides, got {len(sides)}")
    if any(s <= 0 for s in sides):
        raise ValueError("box sides must be positive")
    count = 1
    for s in sides:
        count *= s
    if count > MAX_VERTICES:
        raise ValueError(f"vertex count {count} exceeds the addressable limit")
    lo = [0] * d if lo is None else [int(a) for a in lo]
    return Box(tuple(lo), tuple(a + s for a, s in zip(lo, sides)))


def slab_box(long_extent: int, thickness: int, d: int) -> Box:
    """Box ``long_extent^2 x thickness^(d-2)`` standing in for a thick slab."""
    if thickness < 1:
        raise ValueError("slab thickness must be at least 1")
    b = make_box(d, [long_extent, long_extent] + [thickness] * (d - 2))
    return Box(b.lo, b.hi, tuple([True, True] + [False] * (d - 2)))


def unit_directions(d: int) -> np.ndarray:
    """The ``2d`` unit steps, ordered ``+e_0, -e_0, +e_1, -e_1, ...``."""
    v = np.zeros((2 * d, d), dtype=np.int64)
    for a in range(d):
        v[2 * a, a] = 1
        v[2 * a + 1, a] = -1
    return v


def edge_count(box: Box) -> int:
    sh = box.shape
    total = 0
    for a in range(box.dim):
        rest = 1
        for b in range(box.dim):
            if b != a:
                rest *= sh[b]
        total += (sh[a] - 1) * rest
    return total


def edge_array(box: Box):
    """Internal edges as index pairs.

    Returns
    -------
    src, dst : (E,) int64 arrays
        Row-major indices of the two endpoints, ``src < dst``.
    axis : (E,) int8 array
        Coordinate direction of each edge.
    """
    sh = box.shape
    idx = np.arange(box.size, dtype=np.int64).reshape(sh)
    srcs, dsts, axes = [], [], []
    for a in range(box.dim):
        if sh[a] < 2:
            continue
        lo = [slice(None)] * box.dim
        hi = [slice(None)] * box.dim
        lo[a] = slice(0, sh[a] - 1)
        hi[a] = slice(1, sh[a])
        s = idx[tuple(lo)].ravel()
        srcs.append(s)
        dsts.append(idx[tuple(hi)].ravel())
        axes.append(np.full(s.size, a, dtype=np.int8))
    if not srcs:
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), np.zeros(0, dtype=np.int8)
    return np.concatenate(srcs), np.concatenate(dsts), np.concatenate(axes)


def edges(box: Box) -> list:
    """Every internal undirected edge exactly once, canonically oriented."""
    src, _, axis = edge_array(box)
    xs = box.coords(src)
    return [Edge(tuple(int(c) for c in x), int(a)) for x, a in zip(xs, axis)]


def _endpoint_offsets(p: CablePoint):
    """Endpoints of the carrying edge with their cable distances to ``p``."""
    return ((p.edge.x, p.t), (p.edge.y, 0.5 - p.t))


def cable_distance(p: CablePoint, q: CablePoint) -> float:
    """Cable-system distance: half the graph distance between vertices.

    On a common edge this is ``|t - t'|``; otherwise the shortest routing
    through one endpoint of each edge.
    """
    if p.box is not None and q.box is not None and p.box != q.box:
        raise ValueError("points belong to different ambient boxes")
    if p.edge == q.edge:
        return abs(p.t - q.t)
    best = np.inf
    for x, dx in _endpoint_offsets(p):
        for y, dy in _endpoint_offsets(q):
            graph = 0.5 * sum(abs(a - b) for a, b in zip(x, y))
            best = min(best, dx + graph + dy)
    return float(best)
