"""Random interlacements on finite windows.

The trajectories of the interlacement at level ``u`` that hit a finite key
set ``K`` are, after their first entrance into ``K``, a Poisson(``u cap K``)
number of independent walks started from the normalised equilibrium measure
of ``K``. Their parts before the entrance never visit ``K`` and are not
sampled.

Each walk runs inside a halo box around ``K``. When it steps out of the
halo at a point ``z`` it either escapes for good, with probability
``1 - P_z(hit K)``, or re-enters ``K`` at a point drawn from the exact hitting
distribution ``P_z(X_{H_K} = y)``. Both quantities come from

    P_z(X_{H_K} = y) = sum_w g(z, w) A(w, y),   A = (g restricted to dK)^(-1),

since the right-hand side is harmonic off ``K``, vanishes at infinity and
equals the indicator of ``y`` on the outer boundary ``dK`` of ``K``. The
local times and traces on ``K`` are therefore exact; the halo size only
affects speed and memory.

Local time: every visit of a walk to ``x`` contributes an independent
Exp(1) holding time, and ``l_x = (total holding time at x) / (2d)``, so that
``E[l_x] = u``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph
from scipy import stats

from .greens import EquilibriumMeasure, equilibrium, green_table
from .lattice import Box, unit_directions

LOGGER = logging.getLogger(__name__)

TABLE_MEMORY_LIMIT = 600 * 2**20

__all__ = [
    "InterlacementSample",
    "LocalTimes",
    "ReentryTable",
    "sample_interlacement",
    "local_time_field",
    "occupied_set",
    "edge_trace",
    "laplace_exact",
    "LaplaceNormError",
    "connectivity_experiment",
    "large_deviation_experiment",
    "psi_growth",
    "walk_trace",
    "key_equilibrium",
    "wilson_interval",
    "normalization_experiment",
    "random_potentials",
    "laplace_experiment",
    "poisson_fit_pvalue",
]


# norms within this distance of 1 are treated as 1: the linear system is
# then singular to working precision
NORM_MARGIN = 1e-12


class LaplaceNormError(ValueError):
    """The potential violates ``||G V||_inf < 1``."""


def wilson_interval(k: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1 + z * z / n
    c = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, c - half), min(1.0, c + half))


# ---------------------------------------------------------------------------
# equilibrium and re-entry tables
# ---------------------------------------------------------------------------

_EQ_CACHE: dict = {}
_TABLE_CACHE: dict = {}


def key_equilibrium(key: Box) -> EquilibriumMeasure:
    """Equilibrium measure of a box (cached)."""
    k = (key.lo, key.hi)
    if k not in _EQ_CACHE:
        _EQ_CACHE[k] = equilibrium(key.vertices(), key.dim)
    return _EQ_CACHE[k]


@dataclass
class ReentryTable:
    """Return probabilities and entrance laws for every point just outside a halo."""

    key: Box
    halo: Box
    boundary: np.ndarray      # (nb, d) outer boundary of the key box
    exit_lookup: np.ndarray   # flat over halo.dilate(1); exit index or -1
    ret_prob: np.ndarray      # (ne,)
    cdf: np.ndarray           # (ne, nb) float32, normalised cumulative entrance law

    @property
    def max_return(self) -> float:
        return float(self.ret_prob.max()) if self.ret_prob.size else 0.0


def reentry_table(key: Box, halo: Box) -> ReentryTable:
    """Build (or fetch) the exact re-entry table for ``key`` inside ``halo``."""
    ck = (key.lo, key.hi, halo.lo, halo.hi)
    if ck in _TABLE_CACHE:
        return _TABLE_CACHE[ck]
    d = key.dim
    eq = key_equilibrium(key)
    B = eq.support[eq.weights > 0]
    ext = halo.dilate(1)
    inside = ext.contains(ext.vertices()).reshape(ext.shape)
    core = np.zeros(ext.shape, dtype=bool)
    core[tuple(slice(1, -1) for _ in range(d))] = True
    exits_mask = inside & ~core
    exit_flat = np.nonzero(exits_mask.ravel())[0]
    E = ext.coords(exit_flat)
    nb, ne = B.shape[0], E.shape[0]
    if ne * nb * 4 > TABLE_MEMORY_LIMIT:
        raise MemoryError(f"re-entry table {ne} x {nb} exceeds the memory limit; reduce the halo")
    table = green_table(d)
    A = scipy.linalg.inv(table.matrix(B))
    A = 0.5 * (A + A.T)
    ret = np.empty(ne)
    cdf = np.empty((ne, nb), dtype=np.float32)
    chunk = max(1, 2_000_000 // nb)
    for i0 in range(0, ne, chunk):
        z = E[i0:i0 + chunk]
        rows = table.values(z[:, None, :] - B[None, :, :]) @ A
        rows = np.clip(rows, 0.0, None)
        tot = rows.sum(axis=1)
        ret[i0:i0 + chunk] = tot
        c = np.cumsum(rows, axis=1) / tot[:, None]
        c[:, -1] = 1.0
        cdf[i0:i0 + chunk] = c
    if ret.max() >= 1.0:
        raise RuntimeError("re-entry probability not below one; halo too thin")
    lookup = -np.ones(ext.size, dtype=np.int64)
    lookup[exit_flat] = np.arange(ne)
    out = ReentryTable(key, halo, B, lookup, ret, cdf)
    _TABLE_CACHE[ck] = out
    LOGGER.debug("re-entry table %dx%d, max return %.3f", ne, nb, out.max_return)
    return out


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _grow(a, n):
    b = np.empty(max(n, 2 * a.shape[0]), dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@numba.njit(cache=True)
def _grow2(a, n):
    b = np.empty((max(n, 2 * a.shape[0]), a.shape[1]), dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@numba.njit(cache=True)
def _walk_kernel(starts, seeds, d, halo_lo, halo_hi, ext_lo, ext_shape,
                 lookup, ret_prob, cdf, bpts, max_steps):
    """Walk every trajectory with exact re-entry; returns segments and step codes."""
    n = starts.shape[0]
    steps = np.empty(max(1024, 64 * n), dtype=np.uint8)
    seg_start = np.empty((max(16, 2 * n), d), dtype=np.int64)
    seg_traj = np.empty(max(16, 2 * n), dtype=np.int64)
    seg_off = np.empty(max(16, 2 * n) + 1, dtype=np.int64)
    ns = 0
    nseg = 0
    pos = np.empty(d, dtype=np.int64)
    nb = cdf.shape[1]
    truncated = 0
    for t in range(n):
        np.random.seed(seeds[t])
        for a in range(d):
            pos[a] = starts[t, a]
        if nseg + 1 >= seg_traj.shape[0]:
            seg_start = _grow2(seg_start, nseg + 2)
            seg_traj = _grow(seg_traj, nseg + 2)
            seg_off = _grow(seg_off, nseg + 3)
        seg_start[nseg] = pos
        seg_traj[nseg] = t
        seg_off[nseg] = ns
        nseg += 1
        taken = 0
        while True:
            code = np.random.randint(0, 2 * d)
            axis = code // 2
            if code % 2 == 0:
                pos[axis] += 1
            else:
                pos[axis] -= 1
            if ns >= steps.shape[0]:
                steps = _grow(steps, ns + 1)
            steps[ns] = code
            ns += 1
            taken += 1
            out = False
            for a in range(d):
                if pos[a] < halo_lo[a] or pos[a] >= halo_hi[a]:
                    out = True
            if out:
                flat = 0
                for a in range(d):
                    flat = flat * ext_shape[a] + (pos[a] - ext_lo[a])
                e = lookup[flat]
                if np.random.random() >= ret_prob[e]:
                    break
                r = np.random.random()
                lo = 0
                hi = nb - 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdf[e, mid] < r:
                        lo = mid + 1
                    else:
                        hi = mid
                for a in range(d):
                    pos[a] = bpts[lo, a]
                if nseg + 1 >= seg_traj.shape[0]:
                    seg_start = _grow2(seg_start, nseg + 2)
                    seg_traj = _grow(seg_traj, nseg + 2)
                    seg_off = _grow(seg_off, nseg + 3)
                seg_start[nseg] = pos
                seg_traj[nseg] = t
                seg_off[nseg] = ns
                nseg += 1
            if taken >= max_steps:
                truncated += 1
                break
    seg_off[nseg] = ns
    return steps[:ns].copy(), seg_start[:nseg].copy(), seg_traj[:nseg].copy(), seg_off[:nseg + 1].copy(), truncated


@numba.njit(cache=True)
def _local_time_kernel(steps, seg_start, seg_traj, seg_off, lt_seeds, include, d, lo, shape):
    size = 1
    for a in range(d):
        size *= shape[a]
    ell = np.zeros(size)
    pos = np.empty(d, dtype=np.int64)
    cur = -1
    for s in range(seg_traj.shape[0]):
        t = seg_traj[s]
        if not include[t]:
            continue
        if t != cur:
            np.random.seed(lt_seeds[t])
            cur = t
        for a in range(d):
            pos[a] = seg_start[s, a]
        for k in range(seg_off[s], seg_off[s + 1] + 1):
            if k > seg_off[s]:
                code = steps[k - 1]
                axis = code // 2
                if code % 2 == 0:
                    pos[axis] += 1
                else:
                    pos[axis] -= 1
            ok = True
            flat = 0
            for a in range(d):
                c = pos[a] - lo[a]
                if c < 0 or c >= shape[a]:
                    ok = False
                flat = flat * shape[a] + c
            if ok:
                ell[flat] += np.random.exponential(1.0)
    return ell


@numba.njit(cache=True)
def _trace_kernel(steps, seg_start, seg_traj, seg_off, include, d, lo, shape):
    """Visited-vertex mask and traversed edges (index pairs) inside a box."""
    size = 1
    for a in range(d):
        size *= shape[a]
    visited = np.zeros(size, dtype=np.bool_)
    src = np.empty(steps.shape[0], dtype=np.int64)
    dst = np.empty(steps.shape[0], dtype=np.int64)
    ne = 0
    pos = np.empty(d, dtype=np.int64)
    for s in range(seg_traj.shape[0]):
        if not include[seg_traj[s]]:
            continue
        for a in range(d):
            pos[a] = seg_start[s, a]
        prev = -1
        for k in range(seg_off[s], seg_off[s + 1] + 1):
            if k > seg_off[s]:
                code = steps[k - 1]
                axis = code // 2
                if code % 2 == 0:
                    pos[axis] += 1
                else:
                    pos[axis] -= 1
            ok = True
            flat = 0
            for a in range(d):
                c = pos[a] - lo[a]
                if c < 0 or c >= shape[a]:
                    ok = False
                flat = flat * shape[a] + c
            if ok:
                visited[flat] = True
                if prev >= 0:
                    src[ne] = prev
                    dst[ne] = flat
                    ne += 1
                prev = flat
            else:
                prev = -1
    return visited, src[:ne].copy(), dst[:ne].copy()


@numba.njit(cache=True)
def _free_walks(starts, seeds, d, T):
    """Plain walks of ``T`` steps; positions ``(n, T + 1, d)``."""
    n = starts.shape[0]
    out = np.empty((n, T + 1, d), dtype=np.int64)
    for t in range(n):
        np.random.seed(seeds[t])
        for a in range(d):
            out[t, 0, a] = starts[t, a]
        for k in range(1, T + 1):
            for a in range(d):
                out[t, k, a] = out[t, k - 1, a]
            code = np.random.randint(0, 2 * d)
            if code % 2 == 0:
                out[t, k, code // 2] += 1
            else:
                out[t, k, code // 2] -= 1
    return out


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class InterlacementSample:
    """Trajectories of the interlacement at level ``u`` that hit the key box.

    A trajectory is a list of segments; a new segment starts each time the
    walk re-enters the key box after leaving the halo.
    """

    u: float
    window: Box
    key: Box
    halo: Box
    capacity: float
    labels: np.ndarray       # (n,) sorted in [0, u]
    starts: np.ndarray       # (n, d) first entrance points
    walk_seeds: np.ndarray
    lt_seeds: np.ndarray
    steps: np.ndarray        # uint8 step codes, see unit_directions
    seg_start: np.ndarray
    seg_traj: np.ndarray
    seg_off: np.ndarray
    seed: Optional[int] = None
    max_return: float = 0.0
    truncated: int = 0

    @property
    def dim(self) -> int:
        return self.key.dim

    @property
    def count(self) -> int:
        return int(self.labels.size)

    @property
    def segment_count(self) -> int:
        return int(self.seg_traj.size)

    def steps_of_segment(self, s: int) -> np.ndarray:
        return self.steps[self.seg_off[s]:self.seg_off[s + 1]]

    def mask(self, level: Optional[float] = None) -> np.ndarray:
        if level is None:
            return np.ones(self.count, dtype=np.bool_)
        if level > self.u + 1e-12:
            raise ValueError(f"level {level} above the sampled level {self.u}")
        return self.labels <= level

    def positions(self, s: int) -> np.ndarray:
        """Vertices visited by segment ``s`` in order."""
        dirs = unit_directions(self.dim)
        st = self.steps_of_segment(s)
        return self.seg_start[s] + np.concatenate([np.zeros((1, self.dim), np.int64),
                                                   np.cumsum(dirs[st], axis=0)])


@dataclass
class LocalTimes:
    """Local times on a box; ``values`` has the box shape."""

    box: Box
    values: np.ndarray
    u: float
    normalization: str = "exp1-per-visit/2d"

    def at(self, x) -> float:
        return float(self.values[tuple(np.asarray(x) - self.box.lo_array)])

    def restrict(self, box: Box) -> "LocalTimes":
        sl = tuple(slice(l - bl, h - bl) for l, h, bl in zip(box.lo, box.hi, self.box.lo))
        return LocalTimes(box, self.values[sl], self.u, self.normalization)


def halo_box(key: Box, halo_factor: float) -> Box:
    if halo_factor < 2:
        raise ValueError("halo_factor must be at least 2")
    side = max(key.shape)
    r = max(2, int(math.ceil((halo_factor - 1) * side / 2)))
    return key.dilate(r)


def sample_interlacement(window: Box, u: float, rng: np.random.Generator, halo_factor: float = 2.0,
                         key_margin: int = 1, max_steps: int = 10**8) -> InterlacementSample:
    """Sample the trajectories of the level-``u`` interlacement hitting ``window`` dilated by ``key_margin``.

    Parameters
    ----------
    window : Box
        Region where local times and traces are wanted.
    u : float
        Level, positive.
    rng : numpy Generator
        Source of the Poisson count, starts, labels and per-trajectory seeds.
    halo_factor : float
        Halo side relative to the key box (at least 2).
    """
    if u <= 0:
        raise ValueError("u must be positive")
    key = window.dilate(key_margin)
    halo = halo_box(key, halo_factor)
    eq = key_equilibrium(key)
    tab = reentry_table(key, halo)
    n = int(rng.poisson(u * eq.capacity))
    sup, w = eq.boundary()
    idx = rng.choice(sup.shape[0], size=n, p=w / w.sum()) if n else np.zeros(0, np.int64)
    starts = sup[idx]
    labels = rng.uniform(0.0, u, n)
    order = np.argsort(labels, kind="stable")
    labels, starts = labels[order], starts[order]
    walk_seeds = rng.integers(0, 2**32 - 1, n, dtype=np.int64)
    lt_seeds = rng.integers(0, 2**32 - 1, n, dtype=np.int64)
    ext = halo.dilate(1)
    steps, ss, st, so, trunc = _walk_kernel(
        starts.astype(np.int64), walk_seeds, key.dim, halo.lo_array, halo.hi_array,
        ext.lo_array, np.asarray(ext.shape, np.int64), tab.exit_lookup, tab.ret_prob,
        tab.cdf, tab.boundary.astype(np.int64), max_steps)
    if trunc:
        LOGGER.warning("%d trajectories hit the step cap", trunc)
    return InterlacementSample(u, window, key, halo, eq.capacity, labels, starts, walk_seeds, lt_seeds,
                               steps, ss, st, so, None, tab.max_return, int(trunc))


def local_time_field(sample: InterlacementSample, level: Optional[float] = None,
                     box: Optional[Box] = None) -> LocalTimes:
    """Local times on ``box`` (default: the window) from trajectories with label ``<= level``.

    Holding times are tied to each trajectory, so lowering ``level`` can
    only decrease every local time.
    """
    box = sample.window if box is None else box
    if not (np.all(box.lo_array >= sample.key.lo_array) and np.all(box.hi_array <= sample.key.hi_array)):
        raise ValueError("local times are exact only inside the key box")
    inc = sample.mask(level)
    ell = _local_time_kernel(sample.steps, sample.seg_start, sample.seg_traj, sample.seg_off,
                             sample.lt_seeds, inc, sample.dim, box.lo_array, np.asarray(box.shape, np.int64))
    lvl = sample.u if level is None else level
    return LocalTimes(box, ell.reshape(box.shape) / (2 * sample.dim), lvl)


def occupied_set(ell: LocalTimes) -> np.ndarray:
    """Mask of vertices with positive local time."""
    return ell.values > 0


def edge_trace(sample: InterlacementSample, box: Optional[Box] = None, level: Optional[float] = None):
    """Visited mask and traversed edges (row-major index pairs) of the trace inside ``box``."""
    box = sample.window if box is None else box
    inc = sample.mask(level)
    vis, src, dst = _trace_kernel(sample.steps, sample.seg_start, sample.seg_traj, sample.seg_off,
                                  inc, sample.dim, box.lo_array, np.asarray(box.shape, np.int64))
    return vis.reshape(box.shape), src, dst


def walk_trace(start, T: int, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Positions of ``n`` simple random walks of ``T`` steps, ``(n, T + 1, d)``."""
    start = np.atleast_2d(np.asarray(start, dtype=np.int64))
    if start.shape[0] == 1 and n > 1:
        start = np.repeat(start, n, axis=0)
    seeds = rng.integers(0, 2**32 - 1, start.shape[0], dtype=np.int64)
    return _free_walks(start, seeds, start.shape[1], int(T))


# ---------------------------------------------------------------------------
# Laplace transform
# ---------------------------------------------------------------------------

def laplace_exact(points, values, u: float, d: Optional[int] = None) -> float:
    """``E[exp(sum_x V(x) l_{x,u})] = exp(u <V, (I - G V)^(-1) 1>)``.

    Raises
    ------
    LaplaceNormError
        When ``max_x sum_y g(x, y) |V(y)| >= 1`` (up to rounding, see
        :data:`NORM_MARGIN`); the potential of ``|V|``
        attains its maximum on the support, so checking there suffices.
    """
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.size == 0 or np.all(values == 0):
        return 1.0
    points = np.atleast_2d(np.asarray(points, dtype=np.int64))
    d = points.shape[1] if d is None else d
    G = green_table(d).matrix(points)
    norm = np.max(G @ np.abs(values))
    if norm >= 1.0 - NORM_MARGIN:
        raise LaplaceNormError(f"||G V||_inf = {norm:.6g} >= 1")
    w = np.linalg.solve(np.eye(values.size) - G * values[None, :], np.ones(values.size))
    return float(np.exp(u * np.dot(values, w)))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _components(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    g = scipy.sparse.coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n))
    return scipy.sparse.csgraph.connected_components(g, directed=False)[1]


def connectivity_experiment(u: float, R: int, eps_list, replicas: int, rng_factory, d: int = 3,
                            halo_factor: float = 2.0) -> dict:
    """Frequency of failures of connectivity of the occupied set of ``[0, R)^d``.

    For each replica the interlacement is sampled once on the largest
    region ``[-eps R, (1 + eps) R)^d``; smaller ``eps`` use restrictions of
    the same trace, so the failure events are nested.

    Parameters
    ----------
    rng_factory : callable
        ``rng_factory(k)`` returns the generator of replica ``k``.
    """
    eps_list = sorted(float(e) for e in eps_list)
    margins = [int(math.floor(e * R)) for e in eps_list]
    big = Box((-margins[-1],) * d, (R + margins[-1],) * d)
    inner = Box((0,) * d, (R,) * d)
    fails = np.zeros(len(eps_list), dtype=np.int64)
    for k in range(replicas):
        s = sample_interlacement(big, u, rng_factory(k), halo_factor=halo_factor)
        for j, m in enumerate(margins):
            region = Box((-m,) * d, (R + m,) * d)
            vis, src, dst = edge_trace(s, region)
            lab = _components(region.size, src, dst)
            sub = vis[tuple(slice(m, m + R) for _ in range(d))]
            ids = lab.reshape(region.shape)[tuple(slice(m, m + R) for _ in range(d))][sub]
            if ids.size and np.unique(ids).size > 1:
                fails[j] += 1
    rows = []
    for e, f in zip(eps_list, fails):
        lo, hi = wilson_interval(int(f), replicas)
        rows.append({"eps": e, "failures": int(f), "replicas": replicas,
                     "rate": f / replicas, "ci_lo": lo, "ci_hi": hi})
    return {"u": u, "R": R, "d": d, "rows": rows, "inner": inner.to_json()}


def large_deviation_experiment(u: float, R_list, eps: float, replicas: int, rng_factory, d: int = 3,
                               halo_factor: float = 2.0) -> dict:
    """Estimate ``P(|R^-d sum_{[0,R)^d} l - u| > eps u)`` for each ``R``."""
    rows = []
    for R in R_list:
        win = Box((0,) * d, (int(R),) * d)
        means = np.empty(replicas)
        for k in range(replicas):
            s = sample_interlacement(win, u, rng_factory(R, k), halo_factor=halo_factor)
            means[k] = local_time_field(s).values.mean()
        dev = np.abs(means - u) > eps * u
        lo, hi = wilson_interval(int(dev.sum()), replicas)
        rows.append({"R": int(R), "p": float(dev.mean()), "ci_lo": lo, "ci_hi": hi, "replicas": replicas,
                     "mean": float(means.mean()), "se_mean": float(means.std(ddof=1) / math.sqrt(replicas))})
    ps = [r["p"] for r in rows]
    return {"u": u, "eps": eps, "rows": rows,
            "decreasing": bool(all(a > b for a, b in zip(ps, ps[1:])))}


def normalization_experiment(u: float, side: int, replicas: int, rng_factory, d: int = 3,
                             halo_factor: float = 2.0) -> dict:
    """Mean local time at the central vertex of ``[0, side)^d`` against ``u``."""
    win = Box((0,) * d, (side,) * d)
    c = (side // 2,) * d
    vals = np.empty(replicas)
    for k in range(replicas):
        vals[k] = local_time_field(sample_interlacement(win, u, rng_factory(k), halo_factor=halo_factor)).values[c]
    se = float(vals.std(ddof=1) / math.sqrt(replicas))
    m = float(vals.mean())
    return {"u": u, "side": side, "replicas": replicas, "mean": m, "se": se,
            "z": (m - u) / se if se > 0 else 0.0}


def random_potentials(n: int, rng: np.random.Generator, d: int = 3, side: int = 3, support: int = 4,
                      norm_range=(0.1, 0.3)) -> list:
    """``n`` signed potentials on random points of ``[0, side)^d`` scaled so ``||G |V|||_inf`` lies in ``norm_range``."""
    out = []
    verts = Box((0,) * d, (side,) * d).vertices()
    for _ in range(n):
        k = int(rng.integers(1, support + 1))
        pts = verts[rng.choice(verts.shape[0], size=k, replace=False)]
        vals = rng.uniform(-1.0, 1.0, k)
        G = green_table(d).matrix(pts)
        vals *= rng.uniform(*norm_range) / np.max(G @ np.abs(vals))
        out.append((pts, vals))
    return out


def laplace_experiment(u: float, potentials: list, replicas: int, rng_factory, d: int = 3,
                       halo_factor: float = 2.0) -> list:
    """Empirical ``E[exp(sum V l_u)]`` against :func:`laplace_exact` for each potential.

    One interlacement per replica is sampled on the bounding box of all
    supports and shared by the potentials.
    """
    allp = np.concatenate([p for p, _ in potentials])
    lo, hi = allp.min(axis=0), allp.max(axis=0) + 1
    win = Box(tuple(int(a) for a in lo), tuple(int(a) for a in hi))
    acc = np.empty((len(potentials), replicas))
    for k in range(replicas):
        f = local_time_field(sample_interlacement(win, u, rng_factory(k), halo_factor=halo_factor))
        for j, (pts, vals) in enumerate(potentials):
            ell = f.values[tuple((pts - lo).T)]
            acc[j, k] = math.exp(float(np.dot(vals, ell)))
    rows = []
    for j, (pts, vals) in enumerate(potentials):
        exact = laplace_exact(pts, vals, u, d)
        m = float(acc[j].mean())
        se = float(acc[j].std(ddof=1) / math.sqrt(replicas))
        rows.append({"potential": j, "support": int(len(vals)), "u": u, "mean": m, "se": se,
                     "exact": exact, "z": (m - exact) / se if se > 0 else 0.0, "replicas": replicas})
    return rows


def _capacity(points: np.ndarray, d: int) -> float:
    return equilibrium(points, d).capacity


def psi_growth(u: float, x, T: int, k: int, rng: np.random.Generator, d: Optional[int] = None) -> list:
    """Iterates ``U^(1), ..., U^(k)`` of the trace-growth recursion from vertex ``x``.

    ``U^(1)`` is the trace of one ``T``-step walk from ``x``. Each further
    iterate adds the ``T``-step traces of Poisson(``u cap U``) walks started
    from the normalised equilibrium measure of the previous iterate.

    Returns
    -------
    list of dict
        Per iterate: size, capacity and ``l_inf`` extent around ``x``.
    """
    x = np.asarray(x, dtype=np.int64)
    d = x.size if d is None else d
    if k < 1:
        raise ValueError("k must be at least 1")
    U = np.unique(walk_trace(x, T, rng)[0], axis=0)
    out = []
    for it in range(1, k + 1):
        if it > 1:
            eq = equilibrium(U, d)
            n = int(rng.poisson(u * eq.capacity))
            if n:
                sup, w = eq.boundary()
                st = sup[rng.choice(sup.shape[0], size=n, p=w / w.sum())]
                tr = walk_trace(st, T, rng, n).reshape(-1, d)
                U = np.unique(np.concatenate([U, tr]), axis=0)
        cap = _capacity(U, d)
        out.append({"k": it, "size": int(U.shape[0]), "cap": cap,
                    "extent": int(np.abs(U - x).max()), "upper": int((U - x).max()),
                    "lower": int((U - x).min())})
    return out


def poisson_fit_pvalue(counts: np.ndarray, mean: float) -> float:
    """Chi-square goodness-of-fit p-value of counts against Poisson(``mean``)."""
    counts = np.asarray(counts)
    kmax = int(max(counts.max(), stats.poisson.ppf(0.999, mean)))
    obs = np.bincount(counts, minlength=kmax + 1)[:kmax + 1].astype(float)
    exp = stats.poisson.pmf(np.arange(kmax + 1), mean) * counts.size
    exp[-1] += stats.poisson.sf(kmax, mean) * counts.size
    keep = exp >= 5
    o = np.concatenate([obs[keep], [obs[~keep].sum()]])
    e = np.concatenate([exp[keep], [exp[~keep].sum()]])
    if e[-1] < 5:
        o[-2] += o[-1]
        e[-2] += e[-1]
        o, e = o[:-1], e[:-1]
    return float(stats.chisquare(o, e * o.sum() / e.sum()).pvalue)
