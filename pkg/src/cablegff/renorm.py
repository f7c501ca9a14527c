"""Multiscale machinery: scale ladders, seed events, recursive events and bad paths.

Recursive events are stored sparsely as the set of coarse vertices where
they hold. A cell at level ``n`` holds when two of its level ``n-1``
children hold at ``l^inf`` distance at least ``L_n / l``; two points of a
set are that far apart exactly when the set's coordinate spread along some
axis reaches the threshold, so each cell is evaluated in linear time and
the extreme pair along that axis is the witness.
"""
from __future__ import annotations

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
import scipy.sparse
import scipy.sparse.csgraph

from .gff import VertexField
from .interlace import LocalTimes, edge_trace, local_time_field, sample_interlacement
from .lattice import Box, edge_array, make_box
from .streams import stream

LOGGER = logging.getLogger(__name__)

FAMILIES = ("C", "Chat", "D", "E", "F")
MAX_COORD = 2**62

__all__ = [
    "ScaleSystem",
    "nominal_separation_ratio",
    "build_scales",
    "SeedOutcome",
    "classify_seeds",
    "sample_seed_layers",
    "RecursiveLevel",
    "eval_recursive",
    "check_witness",
    "iid_recursion_exact",
    "find_bad_star_path",
    "bad_circuit_exists",
    "cascade_witness",
    "random_bad_path",
    "MonotoneEvent",
    "decoupling_test",
    "renorm_decay_experiment",
    "FAMILIES",
]


# ---------------------------------------------------------------------------
# scales
# ---------------------------------------------------------------------------

def nominal_separation_ratio(d: int) -> int:
    """``4 (5 * 4^d + 1)``."""
    return 4 * (5 * 4 ** d + 1)


@dataclass(frozen=True)
class ScaleSystem:
    """``L_n = l0^n L0`` with separation ratio ``l``."""

    L0: int
    l0: int
    l: int
    d: int
    n_max: int
    surrogate: bool

    @property
    def L(self) -> list:
        return [self.L0 * self.l0 ** n for n in range(self.n_max + 1)]

    def Ln(self, n: int) -> int:
        return self.L0 * self.l0 ** n

    def separation(self, n: int) -> float:
        """Minimal ``l^inf`` distance ``L_n / l`` between the two children at level ``n``."""
        return self.Ln(n) / self.l

    def to_json(self) -> dict:
        return {"L0": self.L0, "l0": self.l0, "l": self.l, "d": self.d, "n_max": self.n_max,
                "surrogate": self.surrogate, "L": self.L,
                "nominal_l": nominal_separation_ratio(self.d), "nominal_l0": 4 * nominal_separation_ratio(self.d)}


def build_scales(L0: int, d: int = 3, surrogate: Optional[tuple] = None, n_max: int = 2) -> ScaleSystem:
    """Scale ladder; ``surrogate = (l0, l)`` replaces ``l = 4(5 4^d + 1)``, ``l0 = 4 l``.

    Raises
    ------
    ValueError
        On ``L0 < 1`` or when ``L_{n_max}`` overflows 62-bit coordinates.
    """
    if L0 < 1:
        raise ValueError("L0 must be at least 1")
    if surrogate is None:
        l = nominal_separation_ratio(d)
        l0 = 4 * l
    else:
        l0, l = (int(a) for a in surrogate)
        if l0 < 2 or l < 1:
            raise ValueError("surrogate needs l0 >= 2 and l >= 1")
    if L0 * l0 ** n_max >= MAX_COORD:
        raise ValueError(f"L_{n_max} = {L0} * {l0}^{n_max} overflows")
    return ScaleSystem(int(L0), int(l0), int(l), int(d), int(n_max), surrogate is not None)


# ---------------------------------------------------------------------------
# seed events
# ---------------------------------------------------------------------------

@dataclass
class SeedOutcome:
    """Five seed events per coarse vertex ``origin + L0 * k`` (arrays over ``k``)."""

    origin: np.ndarray
    L0: int
    events: dict
    params: dict = field(default_factory=dict)

    @property
    def good(self) -> np.ndarray:
        out = None
        for f in FAMILIES:
            out = self.events[f] if out is None else out & self.events[f]
        return out

    def bad_sets(self) -> dict:
        """Coarse coordinates (lattice units) where each seed event fails."""
        out = {}
        for f in FAMILIES:
            idx = np.argwhere(~self.events[f])
            out[f] = self.origin + self.L0 * idx
        return out


def _e_event(ell: np.ndarray, src, dst, box_shape, x_rel, L0: int, thresh: float) -> bool:
    """Each ``L0``-subcell of ``x + [0, 2 L0)^d`` holds a trace component of mass above
    ``thresh``, and one component of the trace inside the ``2 L0`` box meets all of them."""
    d = len(box_shape)
    coords = np.indices(box_shape).reshape(d, -1).T
    rel = coords - np.asarray(x_rel)
    in_big = np.all((rel >= 0) & (rel < 2 * L0), axis=1)
    occ = ell.ravel() > 0
    n = ell.size

    def comps(mask):
        keep = mask[src] & mask[dst]
        adj = scipy.sparse.coo_matrix((np.ones(int(keep.sum()), np.int8), (src[keep], dst[keep])),
                                      shape=(n, n)).tocsr()
        return scipy.sparse.csgraph.connected_components(adj, directed=False)[1]

    big_lab = comps(in_big & occ)
    allowed = None
    for e in itertools.product((0, 1), repeat=d):
        sub = in_big & np.all((rel >= np.asarray(e) * L0) & (rel < (np.asarray(e) + 1) * L0), axis=1) & occ
        if not sub.any():
            return False
        lab = comps(sub)
        idx = np.nonzero(sub)[0]
        mass = np.bincount(lab[idx], weights=ell.ravel()[idx])
        heavy = np.nonzero(mass > thresh)[0]
        if heavy.size == 0:
            return False
        # big-box components reached by a heavy component of this subcell
        reach = set(big_lab[idx[np.isin(lab[idx], heavy)]].tolist())
        allowed = reach if allowed is None else allowed & reach
        if not allowed:
            return False
    return bool(allowed)


def classify_seeds(ell: LocalTimes, traversed: tuple, phi: VertexField, theta: np.ndarray, u: float,
                   K: float, scales: ScaleSystem, coarse_lo, coarse_shape, mass_level: Optional[float] = None) -> SeedOutcome:
    """Evaluate the five seed events at coarse vertices ``coarse_lo + L0 k``.

    Parameters
    ----------
    ell, phi : local times and field on a common box.
    traversed : (src, dst)
        Edges traversed by the interlacement, as row-major indices of that box.
    theta : (E,) bool
        Bernoulli edge marks in :func:`~cablegff.lattice.edge_array` order.
    mass_level : float, optional
        Intensity ``u'`` in the mass thresholds ``3/4 u' L0^d`` and ``5/4 u' L0^d``
        (defaults to ``u``).

    Raises
    ------
    ValueError
        When some ``x + [-1, 2 L0 + 1)^d`` leaves the common box.
    """
    box = ell.box
    if phi.box != box:
        raise ValueError("local times and field must share a box")
    L0, d = scales.L0, box.dim
    up = u if mass_level is None else mass_level
    lo = np.asarray(coarse_lo, np.int64)
    shape = tuple(int(s) for s in coarse_shape)
    far = lo + L0 * (np.asarray(shape) - 1)
    if np.any(lo - 1 < box.lo_array) or np.any(far + 2 * L0 + 1 > box.hi_array):
        raise ValueError("window too small: every x + [-1, 2 L0 + 1)^d must lie inside the sampled box")
    src, dst, _ = edge_array(box)
    tsrc, tdst = (np.asarray(a, np.int64) for a in traversed)
    ev = {f: np.zeros(shape, dtype=bool) for f in FAMILIES}
    lv = ell.values
    pv = phi.values
    coords = np.indices(box.shape).reshape(d, -1).T + box.lo_array
    for k in itertools.product(*(range(s) for s in shape)):
        x = lo + L0 * np.asarray(k)
        rel = x - box.lo_array
        sl = tuple(slice(a - 1, a + 2 * L0 + 1) for a in rel)
        ev["C"][k] = bool(np.all(pv[sl] <= K))
        ev["Chat"][k] = bool(np.all(pv[sl] >= -K))
        inside = np.all((coords >= x - 1) & (coords < x + 2 * L0 + 1), axis=1)
        ev["D"][k] = bool(np.all(theta[inside[src] & inside[dst]]))
        big = tuple(slice(a, a + 2 * L0) for a in rel)
        sums = [lv[tuple(slice(a + e * L0, a + (e + 1) * L0) for a, e in zip(rel, es))].sum()
                for es in itertools.product((0, 1), repeat=d)]
        ev["F"][k] = bool(max(sums) < 1.25 * up * L0 ** d)
        sub_shape = (2 * L0,) * d
        sub_box = Box(tuple(x), tuple(x + 2 * L0))
        # restrict traversed edges to the 2 L0 box, reindexed locally
        s_in = np.all((coords[tsrc] >= x) & (coords[tsrc] < x + 2 * L0), axis=1)
        d_in = np.all((coords[tdst] >= x) & (coords[tdst] < x + 2 * L0), axis=1)
        keep = s_in & d_in
        ls = sub_box.index(coords[tsrc[keep]])
        ld = sub_box.index(coords[tdst[keep]])
        ev["E"][k] = _e_event(lv[big], ls, ld, sub_shape, np.zeros(d, np.int64), L0, 0.75 * up * L0 ** d)
    return SeedOutcome(lo, L0, ev, {"u": u, "mass_level": up, "K": K})


def sample_seed_layers(coarse_shape, scales: ScaleSystem, u: float, levels, rng: np.random.Generator,
                       field_sampler: Callable = None) -> dict:
    """Sample local times, traversed edges, a field and Bernoulli marks covering a coarse grid.

    The field comes from the isomorphism-free route: an independent
    zero-boundary field on a box with a buffer of ``L0`` (or from
    ``field_sampler(box, rng)`` when given). The marks use the band
    ``K(h) - K~(u)`` of ``levels``.
    """
    from .cable import edge_marks
    from .gff import sample_gff_batch

    L0, d = scales.L0, scales.d
    shape = tuple(int(s) for s in coarse_shape)
    box = make_box(d, [L0 * (s - 1) + 2 * L0 + 2 for s in shape], [-1] * d)
    s = sample_interlacement(box, u, rng)
    ell = local_time_field(s, box=box)
    _, tsrc, tdst = edge_trace(s, box)
    if field_sampler is None:
        big = box.dilate(L0)
        vals = sample_gff_batch(big.shape, rng, 1)[0][tuple(slice(L0, L0 + n) for n in box.shape)]
    else:
        vals = field_sampler(box, rng)
    phi = VertexField(box, vals)
    src, dst, _ = edge_array(box)
    v = phi.values.ravel()
    theta = edge_marks(v[src], v[dst], levels, rng)["theta"]
    return {"box": box, "ell": ell, "traversed": (tsrc, tdst), "phi": phi, "theta": theta,
            "coarse_lo": np.zeros(d, np.int64), "coarse_shape": shape}


# ---------------------------------------------------------------------------
# recursive events
# ---------------------------------------------------------------------------

@dataclass
class RecursiveLevel:
    """Vertices of ``G_n`` where the recursive event holds, with witness pairs."""

    n: int
    vertices: np.ndarray  # (k, d) lattice coordinates
    witnesses: dict  # tuple(x) -> (x1, x2)

    def contains(self, x) -> bool:
        return tuple(int(a) for a in x) in self.witnesses or (
            self.n == 0 and any(np.array_equal(v, x) for v in self.vertices))

    def as_set(self) -> set:
        return {tuple(int(a) for a in v) for v in self.vertices}


def _next_level(children: np.ndarray, scales: ScaleSystem, n: int) -> RecursiveLevel:
    Ln = scales.Ln(n)
    sep = scales.separation(n)
    d = scales.d
    if children.shape[0] == 0:
        return RecursiveLevel(n, np.zeros((0, d), np.int64), {})
    parents = (children // Ln) * Ln
    order = np.lexsort(parents.T[::-1])
    parents, kids = parents[order], children[order]
    cut = np.nonzero(np.any(np.diff(parents, axis=0) != 0, axis=1))[0] + 1
    out, wit = [], {}
    for grp_p, grp in zip(np.split(parents, cut), np.split(kids, cut)):
        if grp.shape[0] < 2:
            continue
        spread = grp.max(axis=0) - grp.min(axis=0)
        a = int(np.argmax(spread))
        if spread[a] >= sep:
            p = tuple(int(c) for c in grp_p[0])
            out.append(p)
            wit[p] = (tuple(int(c) for c in grp[np.argmin(grp[:, a])]), tuple(int(c) for c in grp[np.argmax(grp[:, a])]))
    return RecursiveLevel(n, np.asarray(out, np.int64).reshape(-1, d), wit)


def eval_recursive(seed_true, scales: ScaleSystem, n: int) -> list:
    """Levels ``0 .. n`` of the recursive event built from seed events.

    Parameters
    ----------
    seed_true : (k, d) array
        Coarse vertices (lattice coordinates, multiples of ``L0``) where the seed event holds.

    Returns
    -------
    list of RecursiveLevel
        Entry ``m`` lists the vertices of ``G_m`` where the level-``m`` event holds.
    """
    pts = np.asarray(seed_true, np.int64).reshape(-1, scales.d)
    if np.any(pts % scales.L0):
        raise ValueError("seed vertices must lie on the coarse lattice L0 Z^d")
    levels = [RecursiveLevel(0, pts, {})]
    for m in range(1, n + 1):
        levels.append(_next_level(levels[-1].vertices, scales, m))
    return levels


def check_witness(levels: list, scales: ScaleSystem) -> bool:
    """Independently re-check membership and separation of every recorded witness."""
    for m in range(1, len(levels)):
        below = levels[m - 1].as_set()
        Ln = scales.Ln(m)
        for x, (a, b) in levels[m].witnesses.items():
            if a not in below or b not in below:
                return False
            for c in (a, b):
                if any(not (xi <= ci < xi + Ln) for xi, ci in zip(x, c)):
                    return False
            if max(abs(p - q) for p, q in zip(a, b)) < scales.separation(m):
                return False
    return True


def _prob_no_far_pair(N_side: int, d: int, s: int, q: float) -> float:
    """P(the true sites of an iid Bernoulli(q) grid ``N_side^d`` have every spread below ``s``)."""
    N = N_side ** d
    r = 1.0 - q
    total = r ** N  # empty set
    sides = range(1, min(s, N_side) + 1)
    for widths in itertools.product(sides, repeat=d):
        placements = 1
        for w in widths:
            placements *= N_side - w + 1
        acc = 0.0
        for shrink in itertools.product(range(4), repeat=d):
            # per axis: 0 keep, 1 drop low face, 2 drop high face, 3 drop both
            sign = 1
            size = 1
            for w, sh in zip(widths, shrink):
                cut = (sh & 1) + (sh >> 1)
                sign *= (-1) ** cut
                size *= max(w - cut, 0)
            acc += sign * r ** (N - size)
        total += placements * acc
    return float(min(max(total, 0.0), 1.0))


def iid_recursion_exact(q0: float, scales: ScaleSystem, n: int) -> list:
    """Exact ``P(G_{0,m})`` for ``m = 0..n`` when seed events are iid with probability ``q0``.

    Children of a level-``m`` cell depend on disjoint seeds, so they are iid
    with the level ``m-1`` probability; the cell fails to hold exactly when
    the true children have coordinate spreads below ``ceil(l0 / l)`` in
    every axis, which is evaluated by inclusion-exclusion over bounding boxes.
    """
    s = math.ceil(scales.l0 / scales.l - 1e-12)
    out = [float(q0)]
    for _ in range(n):
        out.append(1.0 - _prob_no_far_pair(scales.l0, scales.d, s, out[-1]))
    return out


# ---------------------------------------------------------------------------
# planar bad paths
# ---------------------------------------------------------------------------

_STAR = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
_NN = [(1, 0), (-1, 0), (0, 1), (0, -1)]


def _ring_index(bad: np.ndarray, center, L0: int):
    """Coarse offsets ``(i, j)`` of grid cells relative to ``center`` in units of ``L0``."""
    ci, cj = (int(c) for c in center)
    ii, jj = np.indices(bad.shape)
    return ii - ci, jj - cj


def find_bad_star_path(bad: np.ndarray, M: int, N: int, center, L0: int = 1) -> Optional[list]:
    """Shortest ``*``-path of bad vertices from ``center + [-M, M]^2`` to ``center + d[-N, N]^2``.

    Parameters
    ----------
    bad : 2-d bool array over coarse planar vertices.
    M, N : radii in lattice units (multiples of ``L0``), ``M < N``.
    center : coarse index of ``x`` inside ``bad``.

    Returns
    -------
    list of (i, j) coarse indices, or None.
    """
    if M % L0 or N % L0 or not 0 <= M < N:
        raise ValueError("need 0 <= M < N, both multiples of L0")
    m, nn = M // L0, N // L0
    di, dj = _ring_index(bad, center, L0)
    rad = np.maximum(np.abs(di), np.abs(dj))
    if rad.max() < nn:
        raise ValueError("grid does not contain the outer boundary")
    region = bad & (rad <= nn)
    start = np.argwhere(region & (rad <= m))
    prev = {}
    dq = deque()
    for s in start:
        t = (int(s[0]), int(s[1]))
        prev[t] = None
        dq.append(t)
    while dq:
        v = dq.popleft()
        if rad[v] == nn:
            path = []
            while v is not None:
                path.append(v)
                v = prev[v]
            return path[::-1]
        for a, b in _STAR:
            w = (v[0] + a, v[1] + b)
            if 0 <= w[0] < bad.shape[0] and 0 <= w[1] < bad.shape[1] and region[w] and w not in prev:
                prev[w] = v
                dq.append(w)
    return None


def bad_circuit_exists(bad: np.ndarray, M: int, N: int, center, L0: int = 1) -> bool:
    """Whether a ``*``-circuit of bad vertices in the annulus ``M <= |z| <= N`` surrounds the inner box.

    Planar duality: such a circuit exists exactly when no nearest-neighbour
    path of good vertices crosses the annulus from radius ``M`` to ``N``.
    """
    m, nn = M // L0, N // L0
    di, dj = _ring_index(bad, center, L0)
    rad = np.maximum(np.abs(di), np.abs(dj))
    good = (~bad) & (rad >= m) & (rad <= nn)
    seen = set()
    dq = deque()
    for s in np.argwhere(good & (rad == m)):
        t = (int(s[0]), int(s[1]))
        seen.add(t)
        dq.append(t)
    while dq:
        v = dq.popleft()
        if rad[v] == nn:
            return False
        for a, b in _NN:
            w = (v[0] + a, v[1] + b)
            if 0 <= w[0] < bad.shape[0] and 0 <= w[1] < bad.shape[1] and good[w] and w not in seen:
                seen.add(w)
                dq.append(w)
    return True


# ---------------------------------------------------------------------------
# cascade
# ---------------------------------------------------------------------------

def _linf(a, b) -> int:
    return int(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cascade_witness(path: np.ndarray, families: Sequence, x, scales: ScaleSystem, n: int,
                    shells: Optional[int] = None, spacing: int = 16) -> dict:
    """Replay the shell construction that turns a crossing ``*``-path into a bad level-``n`` vertex.

    Parameters
    ----------
    path : (k, d) int array
        ``*``-path on ``L0 Z^d`` (consecutive points at ``l^inf`` distance ``L0``)
        whose vertices are bad, starting in ``x + [-L_n, L_n]^d`` and ending on
        ``x + d[-2 L_n, 2 L_n]^d``.
    families : sequence of sets
        Seed families failing at each path vertex (nonempty).
    x : vertex of ``G_n``.
    shells : number of shells (default ``5 * 4^d + 1``).

    Returns
    -------
    dict
        ``ok`` with the certified vertex ``x0``, the shared family and the
        witness pair, or ``ok = False`` with the failing step.

    Raises
    ------
    ValueError
        When the path does not cross the annulus as required.
    """
    d = scales.d
    m = 5 * 4 ** d + 1 if shells is None else int(shells)
    path = np.asarray(path, np.int64).reshape(-1, d)
    x = np.asarray(x, np.int64)
    Ln = scales.Ln(n)
    if path.shape[0] == 0:
        raise ValueError("no bad path given")
    if np.any(path % scales.L0) or np.any(x % Ln):
        raise ValueError("path must lie on L0 Z^d and x on G_n")
    if path.shape[0] > 1 and np.any(np.max(np.abs(np.diff(path, axis=0)), axis=1) != scales.L0):
        raise ValueError("consecutive path points must be at l^inf distance L0")
    r = np.max(np.abs(path - x), axis=1)
    if r[0] > Ln or r.max() < 2 * Ln:
        raise ValueError("path does not connect x + [-L_n, L_n]^d to x + d[-2 L_n, 2 L_n]^d")
    # keep the part before the first exit
    stop = int(np.argmax(r >= 2 * Ln))
    path, r = path[: stop + 1], r[: stop + 1]
    fams = [set(families[i]) for i in range(stop + 1)]
    return _cascade(path, fams, x, scales, n, m, spacing)


def _cascade(path, fams, x, scales, n, m, spacing) -> dict:
    if n == 0:
        # the first vertex is bad and lies within x + [-L0, L0]^d
        return {"ok": True, "x0": tuple(int(a) for a in path[0]), "family": sorted(fams[0])[0],
                "families": fams[0], "level": 0}
    Ln, Lp = scales.Ln(n), scales.Ln(n - 1)
    r = np.max(np.abs(path - x), axis=1)
    if Ln + spacing * (m - 1) * Lp + 2 * Lp > 2 * Ln:
        return {"ok": False, "reason": "shells do not fit inside the annulus", "level": n}
    zs = []
    for i in range(m):
        radius = Ln + spacing * i * Lp
        hit = np.nonzero(r == radius)[0]
        if hit.size == 0:
            return {"ok": False, "reason": f"path misses shell {i}", "level": n}
        j = int(hit[0])
        y = (path[j] // Lp) * Lp  # nearest G_{n-1} point below, within L_{n-1} of the path
        # sub-path from j until it leaves y + [-2 L_{n-1}, 2 L_{n-1}]
        ry = np.max(np.abs(path[j:] - y), axis=1)
        exit_ = np.nonzero(ry >= 2 * Lp)[0]
        if exit_.size == 0:
            return {"ok": False, "reason": f"sub-path at shell {i} does not exit", "level": n}
        sub = path[j: j + int(exit_[0]) + 1]
        res = _cascade(sub, fams[j: j + int(exit_[0]) + 1], y, scales, n - 1, m, spacing)
        if not res["ok"]:
            return res
        z = np.asarray(res["x0"])
        if np.any(z < y - 2 * Lp) or np.any(z >= y + 2 * Lp):
            return {"ok": False, "reason": f"level {n - 1} witness outside its box", "level": n}
        zs.append((tuple(int(a) for a in z), res["families"]))
    cells = {}
    for z, f in zs:
        c = tuple(int(a) for a in (np.asarray(z) // Ln) * Ln)
        if _linf(c, x) > 2 * Ln or any(ci < xi - 2 * Ln or ci >= xi + 2 * Ln for ci, xi in zip(c, x)):
            return {"ok": False, "reason": "witness outside x + [-2 L_n, 2 L_n)^d", "level": n}
        cells.setdefault(c, []).append((z, f))
    sep = scales.separation(n)
    for c, members in sorted(cells.items(), key=lambda kv: -len(kv[1])):
        if len(members) < 6:
            break
        for (z1, f1), (z2, f2) in itertools.combinations(members, 2):
            common = f1 & f2
            if common and _linf(z1, z2) >= sep:
                fam = sorted(common)[0]
                return {"ok": True, "x0": c, "family": fam, "families": {fam}, "pair": (z1, z2),
                        "cell_count": len(members), "level": n}
    return {"ok": False, "reason": "no cell with two separated witnesses of a common family", "level": n,
            "max_cell": max(len(v) for v in cells.values())}


def random_bad_path(x, scales: ScaleSystem, n: int, rng: np.random.Generator, drift: float = 0.3) -> np.ndarray:
    """Random ``*``-path on ``L0 Z^d`` from ``x`` to ``x + d[-2 L_n, 2 L_n]^d``, biased outwards."""
    d, L0 = scales.d, scales.L0
    target = 2 * scales.Ln(n)
    x = np.asarray(x, np.int64)
    steps = np.array([s for s in itertools.product((-1, 0, 1), repeat=d) if any(s)], np.int64)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    pos = x.copy()
    out = [pos.copy()]
    while np.max(np.abs(pos - x)) < target:
        score = steps @ direction * drift + rng.gumbel(size=steps.shape[0])
        pos = pos + L0 * steps[int(np.argmax(score))]
        out.append(pos.copy())
    return np.asarray(out)


# ---------------------------------------------------------------------------
# decoupling
# ---------------------------------------------------------------------------

@dataclass
class MonotoneEvent:
    """Indicator of an event on the values of one box; ``increasing`` fixes the sprinkling sign."""

    name: str
    func: Callable[[np.ndarray], bool]
    increasing: bool


def _se_product_gap(f12, g1, g2) -> tuple:
    """Estimate ``E[f1 f2] - E[g1] E[g2]`` and its delta-method standard error (paired samples)."""
    m12, m1, m2 = f12.mean(), g1.mean(), g2.mean()
    infl = f12 - (m2 * g1 + m1 * g2)
    n = f12.size
    return float(m12 - m1 * m2), float(infl.std(ddof=1) / math.sqrt(n))


def decoupling_test(kind: str, events: Sequence, boxes: tuple, eps: float, replicas: int, seed: int = 0,
                    u: Optional[float] = None, d: int = 3, check_samples: int = 50) -> dict:
    """Compare ``E[f1 f2]`` with the sprinkled product ``E'[f1] E'[f2]``.

    For interlacements the sprinkled law is the intensity ``u (1 +- eps)``
    (one nested sample per replica gives all three levels); for the field
    it is the shift ``phi +- eps``. The sign is ``+`` for increasing events.
    ``events`` is a list of pairs of :class:`MonotoneEvent`, both of the
    same monotonicity. The explicit error term of the inequality has
    unspecified constants and is reported as ``0``.

    Raises
    ------
    ValueError
        On overlapping boxes, mixed monotonicity, or when sampled coupled
        pairs contradict the declared monotonicity.
    """
    A1, A2 = boxes
    s = _box_gap(A1, A2)
    if s < 1:
        raise ValueError("boxes must be disjoint with separation at least 1")
    for f1, f2 in events:
        if f1.increasing != f2.increasing:
            raise ValueError(f"events {f1.name}/{f2.name} are not both increasing or both decreasing")
    lo = np.minimum(A1.lo_array, A2.lo_array)
    hi = np.maximum(A1.hi_array, A2.hi_array)
    window = make_box(d, hi - lo, lo)
    sl1 = tuple(slice(a, b) for a, b in zip(A1.lo_array - lo, A1.hi_array - lo))
    sl2 = tuple(slice(a, b) for a, b in zip(A2.lo_array - lo, A2.hi_array - lo))
    if kind == "interlacement":
        if u is None or u <= 0:
            raise ValueError("interlacement kind needs u > 0")
        levels = {"base": u, "up": u * (1 + eps), "down": u * (1 - eps)}
        vals = {k: [] for k in levels}
        for k in range(replicas):
            rng = stream(seed, "decouple-interlacement", k)
            smp = sample_interlacement(window, levels["up"], rng)
            for name, lev in levels.items():
                vals[name].append(local_time_field(smp, lev, window).values)
        vals = {k: np.asarray(v) for k, v in vals.items()}
        lower, upper = vals["down"], vals["up"]
    elif kind == "gff":
        from .iso import FreeWindowSampler

        sampler = FreeWindowSampler(window)
        base = np.concatenate([sampler.sample(stream(seed, "decouple-gff", k), 1) for k in range(replicas)])
        vals = {"base": base, "up": base + eps, "down": base - eps}
        lower, upper = vals["down"], vals["up"]
    else:
        raise ValueError(f"unknown kind {kind!r}")
    _check_monotone(events, lower, vals["base"], upper, (sl1, sl2), check_samples)
    rows = []
    for f1, f2 in events:
        sp = "up" if f1.increasing else "down"
        a1 = np.array([f1.func(v[sl1]) for v in vals["base"]], float)
        a2 = np.array([f2.func(v[sl2]) for v in vals["base"]], float)
        b1 = np.array([f1.func(v[sl1]) for v in vals[sp]], float)
        b2 = np.array([f2.func(v[sl2]) for v in vals[sp]], float)
        gap, se = _se_product_gap(a1 * a2, b1, b2)
        lhs = float((a1 * a2).mean())
        rhs = float(b1.mean() * b2.mean())
        rows.append({"pair": f"{f1.name}/{f2.name}", "increasing": f1.increasing, "lhs": lhs, "rhs": rhs,
                     "unsprinkled_product": float(a1.mean() * a2.mean()), "gap": gap, "se": se,
                     "slack": 0.0, "holds": bool(gap <= 3 * max(se, 1.0 / replicas))})
    return {"kind": kind, "eps": eps, "u": u, "separation": s, "replicas": replicas, "seed": seed,
            "rows": rows, "all_hold": all(r["holds"] for r in rows)}


def _box_gap(A: Box, B: Box) -> int:
    gap = 0
    for a0, a1, b0, b1 in zip(A.lo, A.hi, B.lo, B.hi):
        g = max(b0 - (a1 - 1), a0 - (b1 - 1), 0)
        gap = max(gap, g)
    return gap


def _check_monotone(events, lower, base, upper, slices, n_check):
    for f1, f2 in events:
        for f, sl in ((f1, slices[0]), (f2, slices[1])):
            for k in range(min(n_check, base.shape[0])):
                trio = [bool(f.func(v[k][sl])) for v in (lower, base, upper)]
                if not (trio[0] <= trio[1] <= trio[2]) if f.increasing else not (trio[0] >= trio[1] >= trio[2]):
                    raise ValueError(f"event {f.name} is not {'increasing' if f.increasing else 'decreasing'}")


# ---------------------------------------------------------------------------
# decay of recursive bad events
# ---------------------------------------------------------------------------

def _iid_seeds(shape, q, rng):
    return rng.random(shape) < q


def renorm_decay_experiment(scales: ScaleSystem, n_max: int, replicas: int, seed: int = 0,
                            seed_kind: str = "iid", q: float = 0.05, K: Optional[float] = None) -> dict:
    """Empirical ``P(G_{0,n})`` for ``n = 0..n_max`` at surrogate scales.

    ``seed_kind = "iid"`` draws independent seed events with probability
    ``q`` and compares with :func:`iid_recursion_exact`; ``"gff"`` uses the
    failure of the field event ``max phi <= K`` over ``x + [-1, 2 L0 + 1)^d``.
    """
    from .gff import sample_gff_batch

    d, L0 = scales.d, scales.L0
    side = scales.l0 ** n_max
    hits = np.zeros((replicas, n_max + 1), bool)
    for k in range(replicas):
        rng = stream(seed, "renorm-decay", seed_kind, k)
        if seed_kind == "iid":
            bad = _iid_seeds((side,) * d, q, rng)
        elif seed_kind == "gff":
            if K is None:
                raise ValueError("gff seeds need K")
            n_side = L0 * (side - 1) + 2 * L0 + 2
            buf = max(L0, math.ceil(n_side / 4))
            phi = sample_gff_batch((n_side + 2 * buf,) * d, rng, 1)[0][(slice(buf, buf + n_side),) * d]
            # x + [-1, 2 L0 + 1) in box coordinates starts at L0 * k
            win = 2 * L0 + 2
            mx = sliding_window_view(phi, (win,) * d).max(axis=tuple(range(d, 2 * d)))
            bad = mx[(slice(None, None, L0),) * d][(slice(0, side),) * d] > K
        else:
            raise ValueError(f"unknown seed kind {seed_kind!r}")
        pts = np.argwhere(bad) * L0
        levels = eval_recursive(pts, scales, n_max)
        origin = (0,) * d
        for m, lev in enumerate(levels):
            hits[k, m] = origin in lev.as_set() if m > 0 else bool(bad[(0,) * d])
    p = hits.mean(axis=0)
    se = np.sqrt(np.maximum(p * (1 - p), 1.0 / replicas) / replicas)
    out = {"scales": scales.to_json(), "seed_kind": seed_kind, "replicas": replicas, "seed": seed,
           "p": p.tolist(), "se": se.tolist(), "targets": [2.0 ** (-(2 ** m)) for m in range(n_max + 1)]}
    if seed_kind == "iid":
        out["q"] = q
        out["exact"] = iid_recursion_exact(q, scales, n_max)
        out["z"] = [(a - b) / s_ for a, b, s_ in zip(p, out["exact"], se)]
    with np.errstate(divide="ignore", invalid="ignore"):
        out["loglog2"] = [float(np.log2(-np.log2(x))) if 0 < x < 1 else None for x in p]
    out["strictly_decreasing"] = bool(np.all(np.diff(p) < 0))
    return out
