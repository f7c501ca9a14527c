"""Clusters of level sets and the percolation experiments built on them.

Crossing experiments use a sweep: for one field sample, every edge gets the
level at which it becomes open, edges are merged in that order with a
union-find that tracks contact with two opposite faces of the window, and
the level of the first face-to-face merge is the replica's critical level.
One sweep gives the crossing indicator at every level at once, and the
indicators are nested in the level by construction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numba
import numpy as np
import scipy.integrate
import scipy.sparse
import scipy.sparse.csgraph
from scipy import stats

from .cable import QUARTER_BRIDGE, TruncationConstants, level_K, stays_above_prob
from .gff import VertexField, sample_gff_batch
from .greens import green_table, sigma0_sq
from .interlace import wilson_interval
from .lattice import Box, edge_array, make_box, unit_directions
from .streams import stream

LOGGER = logging.getLogger(__name__)

__all__ = [
    "OpenConfig",
    "ClusterLabeling",
    "components",
    "vertex_level_set",
    "cable_level_set",
    "cable_thresholds",
    "label_clusters",
    "CrossingCurves",
    "critical_levels",
    "crossing_curve",
    "estimate_hstar",
    "estimate_pc",
    "sign_cluster_experiment",
    "flip_boundary_samples",
    "flip_closed_form",
    "flip_monte_carlo",
    "flip_experiment",
    "monotone_pair",
]

MODES = ("lattice", "cable", "slab", "truncated")


# ---------------------------------------------------------------------------
# configurations and labels
# ---------------------------------------------------------------------------

@dataclass
class OpenConfig:
    """Open vertices and open edges of a box (edges in :func:`edge_array` order)."""

    box: Box
    vertices: np.ndarray
    edges: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=bool).reshape(self.box.shape)
        src, dst, _ = edge_array(self.box)
        self.edges = np.asarray(self.edges, dtype=bool).ravel()
        if self.edges.size != src.size:
            raise ValueError(f"expected {src.size} edge flags, got {self.edges.size}")
        v = self.vertices.ravel()
        if np.any(self.edges & ~(v[src] & v[dst])):
            raise ValueError("open edge with a closed endpoint")


@dataclass
class ClusterLabeling:
    """Component ids of open vertices (``-1`` on closed ones), sizes and crossing flags."""

    labels: np.ndarray
    sizes: np.ndarray
    crossing: np.ndarray  # (d,) bool: some component touches both faces orthogonal to axis a

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def components(n: int, src, dst) -> np.ndarray:
    """Connected-component labels of the graph on ``n`` vertices with the given edges."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    adj = scipy.sparse.coo_matrix((np.ones(src.size, dtype=np.int8), (src, dst)), shape=(n, n)).tocsr()
    _, lab = scipy.sparse.csgraph.connected_components(adj, directed=False)
    return lab.astype(np.int64)


def vertex_level_set(field_: VertexField, h: float) -> OpenConfig:
    """``{phi >= h}`` with nearest-neighbour edges between open vertices."""
    v = field_.values >= h
    src, dst, _ = edge_array(field_.box)
    flat = v.ravel()
    return OpenConfig(field_.box, v, flat[src] & flat[dst], {"level": h, "mode": "lattice"})


def cable_thresholds(phi_x, phi_y, uniforms) -> np.ndarray:
    """Smallest ``h`` at which a cable edge is open in ``{phi~ >= -h}``.

    The edge is open at level ``h`` iff ``U < 1 - exp(-2 (phi_x + h)(phi_y + h))``
    with both endpoints at least ``-h``, i.e. iff ``(phi_x + h)(phi_y + h) >= c``
    with ``c = -log(1 - U) / 2``; the threshold solves the quadratic.
    """
    phi_x = np.asarray(phi_x, float)
    phi_y = np.asarray(phi_y, float)
    c = -0.5 * np.log1p(-np.asarray(uniforms, float))
    return 0.5 * (-(phi_x + phi_y) + np.sqrt((phi_x - phi_y) ** 2 + 4.0 * c))


def cable_level_set(field_: VertexField, h: float, rng: Optional[np.random.Generator] = None,
                    uniforms: Optional[np.ndarray] = None) -> OpenConfig:
    """Trace on Z^d of the cable set ``{phi~ >= -h}``.

    Vertices are open iff ``phi >= -h``; an edge is open iff both endpoints
    are and its bridge stays above ``-h``, decided by one uniform per edge.
    Passing the same ``uniforms`` at several levels gives nested sets.
    """
    src, dst, _ = edge_array(field_.box)
    if uniforms is None:
        uniforms = rng.random(src.size)
    v = field_.values.ravel()
    tau = 1.0
    p = stays_above_prob(v[src], v[dst], -h, tau)
    e = np.asarray(uniforms) < p
    return OpenConfig(field_.box, field_.values >= -h, e, {"level": h, "mode": "cable"})


def label_clusters(cfg: OpenConfig) -> ClusterLabeling:
    """Union-find labelling of open vertices along open edges."""
    box = cfg.box
    src, dst, _ = edge_array(box)
    lab = components(box.size, src[cfg.edges], dst[cfg.edges])
    openv = cfg.vertices.ravel()
    # compact ids over open vertices only
    ids = np.full(lab.max() + 1 if lab.size else 0, -1, dtype=np.int64)
    roots = np.unique(lab[openv])
    ids[roots] = np.arange(roots.size)
    out = np.where(openv, ids[lab], -1)
    sizes = np.bincount(out[openv], minlength=roots.size) if roots.size else np.zeros(0, np.int64)
    coords = np.indices(box.shape).reshape(box.dim, -1)
    crossing = np.zeros(box.dim, dtype=bool)
    for a in range(box.dim):
        lo = np.zeros(roots.size, bool)
        hi = np.zeros(roots.size, bool)
        on_lo = openv & (coords[a] == 0)
        on_hi = openv & (coords[a] == box.shape[a] - 1)
        lo[out[on_lo]] = True
        hi[out[on_hi]] = True
        crossing[a] = bool(np.any(lo & hi))
    return ClusterLabeling(out.reshape(box.shape), sizes, crossing)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True)
def _sweep(order, src, dst, level, flags0):
    """Merge edges in ``order``; return the level of the first merge touching both faces."""
    n = flags0.size
    parent = np.arange(n)
    flags = flags0.copy()
    for k in range(order.size):
        e = order[k]
        a = _find(parent, src[e])
        b = _find(parent, dst[e])
        if a == b:
            continue
        parent[a] = b
        flags[b] |= flags[a]
        if flags[b] == 3:
            return level[e]
    return np.nan


@lru_cache(maxsize=16)
def _window_geometry(shape: tuple, axis: int):
    box = Box((0,) * len(shape), shape)
    src, dst, _ = edge_array(box)
    coords = np.indices(shape).reshape(len(shape), -1)
    flags = np.zeros(box.size, dtype=np.int8)
    flags[coords[axis] == 0] |= 1
    flags[coords[axis] == shape[axis] - 1] |= 2
    return src, dst, flags


def sweep_critical(window_values: np.ndarray, mode: str, uniforms: Optional[np.ndarray] = None,
                   axis: int = 0, K: Optional[float] = None) -> float:
    """Critical level of one window for a face-to-face crossing along ``axis``.

    ``lattice``/``slab``/``truncated``: largest ``h`` such that
    ``{phi >= h}`` (intersected with ``{phi <= K}`` when truncated) crosses.
    ``cable``: smallest ``h`` such that the cable set ``{phi~ >= -h}`` crosses.
    Returns ``nan`` when no crossing exists at any level.
    """
    src, dst, flags = _window_geometry(tuple(window_values.shape), axis)
    v = window_values.ravel()
    if mode in ("lattice", "slab", "truncated"):
        w = np.minimum(v[src], v[dst])
        if mode == "truncated":
            if K is None:
                raise ValueError("truncated mode needs K")
            w = np.where(np.maximum(v[src], v[dst]) <= K, w, -np.inf)
        order = np.argsort(-w, kind="stable")
        return float(_sweep(order, src, dst, w, flags))
    if mode == "cable":
        if uniforms is None:
            raise ValueError("cable mode needs edge uniforms")
        t = cable_thresholds(v[src], v[dst], uniforms)
        order = np.argsort(t, kind="stable")
        return float(_sweep(order, src, dst, t, flags))
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def _crosses(mode: str, crit: np.ndarray, h) -> np.ndarray:
    """Crossing indicator at level(s) ``h`` from per-replica critical levels."""
    crit = np.asarray(crit, float)[:, None]
    h = np.atleast_1d(np.asarray(h, float))[None, :]
    with np.errstate(invalid="ignore"):
        if mode == "cable":
            return np.where(np.isnan(crit), False, crit <= h)
        return np.where(np.isnan(crit), False, h <= crit)


# ---------------------------------------------------------------------------
# crossing curves
# ---------------------------------------------------------------------------

@dataclass
class CrossingCurves:
    """Per-replica critical levels for several window sizes of one mode."""

    d: int
    mode: str
    critical: dict
    seed: int
    buffer: float = 0.25
    axis: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def L_list(self) -> list:
        return sorted(self.critical)

    def theta(self, L: int, h_grid) -> np.ndarray:
        return _crosses(self.mode, self.critical[L], h_grid).mean(axis=0)

    def counts(self, L: int, h_grid) -> np.ndarray:
        return _crosses(self.mode, self.critical[L], h_grid).sum(axis=0)

    def rows(self, h_grid) -> list:
        out = []
        for L in self.L_list:
            n = self.critical[L].size
            for h, k in zip(np.atleast_1d(h_grid), self.counts(L, h_grid)):
                lo, hi = wilson_interval(int(k), n)
                out.append({"L": L, "h": float(h), "mode": self.mode, "crossings": int(k),
                            "replicas": n, "theta": k / n, "ci_lo": lo, "ci_hi": hi})
        return out


def _field_box_shape(d: int, L: int, mode: str, buffer: float, thickness: Optional[int]):
    b = int(round(buffer * L))
    if mode == "slab":
        T = thickness or 4
        return (L + 2 * b, L + 2 * b) + (T,) * (d - 2), (b, b) + (0,) * (d - 2), (L, L) + (T,) * (d - 2)
    return (L + 2 * b,) * d, (b,) * d, (L,) * d


def critical_levels(d: int, L: int, replicas: int, seed: int, modes: Sequence[str] = ("lattice",),
                    buffer: float = 0.25, axis: int = 0, thickness: Optional[int] = None,
                    K: Optional[float] = None, tag: str = "crossing") -> dict:
    """Per-replica critical levels for each requested mode, sharing the field samples.

    Each replica draws a zero-boundary field on a box of side ``L + 2 b``
    (``b = buffer L``) and inspects the central window of side ``L``.
    Replica ``k`` uses the stream keyed by ``(seed, tag, L, k)``.
    """
    make_box(d, [max(L, 1)] * d)  # dimension check
    if any(m not in MODES for m in modes):
        raise ValueError(f"unknown mode in {modes}; expected {MODES}")
    if "slab" in modes and len(modes) > 1:
        raise ValueError("slab mode uses its own geometry; run it separately")
    shape, off, win = _field_box_shape(d, L, modes[0], buffer, thickness)
    sl = tuple(slice(o, o + w) for o, w in zip(off, win))
    n_edges = edge_array(Box((0,) * d, win))[0].size
    out = {m: np.empty(replicas) for m in modes}
    for k in range(replicas):
        rng = stream(seed, tag, L, k)
        phi = sample_gff_batch(shape, rng, 1)[0][sl]
        uni = rng.random(n_edges) if "cable" in modes else None
        for m in modes:
            out[m][k] = sweep_critical(phi, m, uni, axis, K)
    return out


def crossing_curve(d: int, L_list, h_grid, replicas: int, mode: str = "lattice", seed: int = 0,
                   buffer: float = 0.25, axis: int = 0, thickness: Optional[int] = None,
                   K: Optional[float] = None) -> tuple:
    """Crossing frequencies ``theta_L(h)`` with Wilson intervals.

    Returns
    -------
    (CrossingCurves, rows)
        ``rows`` has columns ``L, h, mode, crossings, replicas, ci_lo, ci_hi``.
    """
    if len(L_list) == 0 or len(np.atleast_1d(h_grid)) == 0:
        raise ValueError("grids must be nonempty")
    crit = {int(L): critical_levels(d, int(L), replicas, seed, (mode,), buffer, axis, thickness, K)[mode]
            for L in L_list}
    curves = CrossingCurves(d, mode, crit, seed, buffer, axis)
    return curves, curves.rows(h_grid)


def _pair_crossing(h: np.ndarray, small: np.ndarray, large: np.ndarray, decreasing: bool) -> Optional[float]:
    """Level where the larger window's curve drops below the smaller one's.

    For decreasing curves (lattice) the larger window is above before the
    crossing and below after it; increasing curves are handled by symmetry.
    Returns ``None`` when the curves never cross in that direction.
    """
    diff = (large - small) if decreasing else (small - large)
    k1 = int(np.argmax(diff))
    k2 = int(np.argmin(diff))
    if not (diff[k1] > 0 > diff[k2] and k1 < k2):
        return None
    for k in range(k1, k2):
        if diff[k] > 0 >= diff[k + 1]:
            t = diff[k] / (diff[k] - diff[k + 1])
            return float(h[k] + t * (h[k + 1] - h[k]))
    return None


def _hstar_point(h: np.ndarray, thetas: dict, decreasing: bool) -> tuple:
    Ls = sorted(thetas)
    pts = []
    for i in range(len(Ls)):
        for j in range(i + 1, len(Ls)):
            c = _pair_crossing(h, thetas[Ls[i]], thetas[Ls[j]], decreasing)
            if c is not None:
                pts.append(c)
    return (float(np.mean(pts)) if pts else None), pts


def estimate_hstar(curves, h_grid, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> dict:
    """Pairwise crossing point of the ``theta_L`` curves, with a bootstrap interval.

    Parameters
    ----------
    curves : CrossingCurves or dict
        Either replica-level data (bootstrap available) or a mapping
        ``L -> theta values on h_grid`` (point estimate only).
    """
    h = np.asarray(h_grid, float)
    if isinstance(curves, CrossingCurves):
        thetas = {L: curves.theta(L, h) for L in curves.L_list}
        decreasing = curves.mode != "cable"
    else:
        thetas = {int(L): np.asarray(v, float) for L, v in curves.items()}
        decreasing = True
    if len(thetas) < 2:
        raise ValueError("need at least two window sizes")
    point, pairs = _hstar_point(h, thetas, decreasing)
    out = {"hstar": point, "pairs": pairs, "indeterminate": point is None,
           "ci": None, "boot_indeterminate": None, "n_boot": 0}
    if point is None:
        LOGGER.warning("crossing curves never cross; no estimate reported")
        return out
    if isinstance(curves, CrossingCurves) and n_boot > 0:
        rng = stream(seed, "bootstrap")
        vals = []
        misses = 0
        for _ in range(n_boot):
            th = {}
            for L in curves.L_list:
                c = curves.critical[L]
                th[L] = _crosses(curves.mode, c[rng.integers(0, c.size, c.size)], h).mean(axis=0)
            p, _ = _hstar_point(h, th, decreasing)
            if p is None:
                misses += 1
            else:
                vals.append(p)
        a = (1 - level) / 2
        if vals:
            out["ci"] = (float(np.quantile(vals, a)), float(np.quantile(vals, 1 - a)))
        out["boot_indeterminate"] = misses / n_boot
        out["n_boot"] = n_boot
    return out


def estimate_pc(hstar: float, d: int) -> float:
    """``P(phi_0 >= hstar)`` for the centred field with variance ``g(0)``."""
    g0 = green_table(d).value(np.zeros(d, dtype=np.int64))
    return float(stats.norm.sf(hstar / math.sqrt(g0)))


# ---------------------------------------------------------------------------
# two-sign clusters
# ---------------------------------------------------------------------------

def sign_cluster_experiment(d: int, L_list, replicas: int, h_grid, seed: int = 0, buffer: float = 0.25,
                            axis: int = 0) -> dict:
    """Frequencies with which ``{phi >= h}``, ``{phi < h}`` and both cross the window."""
    h = np.atleast_1d(np.asarray(h_grid, float))
    rows = []
    for L in L_list:
        shape, off, win = _field_box_shape(d, L, "lattice", buffer, None)
        sl = tuple(slice(o, o + w) for o, w in zip(off, win))
        up = np.empty(replicas)
        down = np.empty(replicas)
        for k in range(replicas):
            phi = sample_gff_batch(shape, stream(seed, "signs", L, k), 1)[0][sl]
            up[k] = sweep_critical(phi, "lattice", axis=axis)
            # {phi < h} = {-phi > -h}: crosses iff -h <= critical level of -phi
            down[k] = sweep_critical(-phi, "lattice", axis=axis)
        a = _crosses("lattice", up, h)
        b = _crosses("lattice", down, -h)
        for j, hv in enumerate(h):
            both = a[:, j] & b[:, j]
            row = {"L": L, "h": float(hv), "replicas": replicas}
            for name, ind in (("upper", a[:, j]), ("lower", b[:, j]), ("both", both)):
                k_ = int(ind.sum())
                lo, hi = wilson_interval(k_, replicas)
                row[name] = k_ / replicas
                row[name + "_ci"] = (lo, hi)
            row["z_symmetry"] = _paired_z(a[:, j], b[:, j])
            rows.append(row)
    return {"d": d, "seed": seed, "rows": rows}


def _paired_z(a: np.ndarray, b: np.ndarray) -> float:
    diff = a.astype(float) - b.astype(float)
    sd = diff.std(ddof=1) if diff.size > 1 else 0.0
    if sd == 0:
        return 0.0
    return float(diff.mean() / (sd / math.sqrt(diff.size)))


# ---------------------------------------------------------------------------
# sign flip at a vertex
# ---------------------------------------------------------------------------

def monotone_pair(p_f, p_g, rng: np.random.Generator, n: int = 1) -> tuple:
    """``(1{Y <= p_f}, 1{Y <= p_g})`` from one uniform ``Y``; ordered when ``p_f <= p_g``."""
    y = rng.random(n)
    return y <= p_f, y <= p_g


def flip_boundary_samples(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Field values at the ``2d`` edge midpoints around a vertex, shape ``(n, 2d)``.

    The vertex and its neighbours are drawn from the infinite-volume field;
    each midpoint is the average of its endpoints plus an independent
    centred normal of variance ``1/4`` (bridge of cable length ``1/2``).
    Columns follow :func:`~cablegff.lattice.unit_directions`.
    """
    pts = np.vstack([np.zeros((1, d), np.int64), unit_directions(d)])
    cov = green_table(d).matrix(pts)
    chol = np.linalg.cholesky(cov)
    v = rng.standard_normal((n, pts.shape[0])) @ chol.T
    return 0.5 * (v[:, :1] + v[:, 1:]) + 0.5 * rng.standard_normal((n, 2 * d))


def _flip_setup(b: np.ndarray, h: float, K: float):
    b = np.asarray(b, float)
    d2 = b.shape[-1]
    beta = b.mean(axis=-1)
    sd = math.sqrt(sigma0_sq(d2 // 2))
    inside = np.all(np.abs(b) <= K, axis=-1)
    ev = (b >= -h) & inside[..., None]
    return beta, sd, inside, ev


def _quarter_stay(phi, b, h):
    """``P(min >= -h)`` for the quarter-edge bridge from the vertex to a midpoint."""
    return stays_above_prob(phi, b, -h, QUARTER_BRIDGE[0] * QUARTER_BRIDGE[1])


def flip_closed_form(b, h: float, K: float) -> dict:
    """Conditional probabilities of the flip events given one boundary configuration.

    ``G`` requires, for some direction ``v`` with ``E^{x,v}``, the quarter
    bridge from the vertex to the ``v``-midpoint to stay above ``-h``.
    ``E`` is the union of the ``E^{x,v}``.
    """
    beta, sd, inside, ev = _flip_setup(np.atleast_2d(b), h, K)
    beta, ev = float(beta[0]), ev[0]
    e = bool(ev.any())
    if not e:
        return {"G": 0.0, "E_and_high": 0.0, "E": False, "beta": beta, "sd": sd}
    bv = np.asarray(b, float)[ev]
    dens = stats.norm(beta, sd)

    def integrand(y):
        return dens.pdf(y) * (1.0 - np.prod(1.0 - _quarter_stay(y, bv, h)))

    lo, hi = -h, max(beta, -h) + 12 * sd
    pts = sorted({lo, min(max(beta, lo), hi), min(h, hi)})
    g, err = scipy.integrate.quad(integrand, lo, hi, points=pts[1:-1] or None, epsabs=1e-13, epsrel=1e-11,
                                  limit=200)
    rhs = float(dens.sf(h))
    return {"G": float(g), "G_quad_error": float(err), "E_and_high": rhs, "E": True, "beta": beta, "sd": sd}


def flip_monte_carlo(b, h: float, K: float, rng: np.random.Generator, n: int) -> dict:
    """Simulate the vertex value and the quarter-bridge events given the boundary.

    Returns the two frequencies, their paired difference and its standard error.
    """
    beta, sd, inside, ev = _flip_setup(np.atleast_2d(b), h, K)
    beta, ev = float(beta[0]), ev[0]
    phi = beta + sd * rng.standard_normal(n)
    bv = np.asarray(b, float)
    y = rng.random((n, bv.size))
    f = (y < _quarter_stay(phi[:, None], bv[None, :], h)) & ev[None, :]
    g = f.any(axis=1)
    r = np.full(n, bool(ev.any())) & (phi >= h)
    diff = g.astype(float) - r.astype(float)
    return {"G": float(g.mean()), "E_and_high": float(r.mean()),
            "se_G": float(g.std(ddof=1) / math.sqrt(n)), "se_E_and_high": float(r.std(ddof=1) / math.sqrt(n)),
            "diff": float(diff.mean()), "se_diff": float(diff.std(ddof=1) / math.sqrt(n)), "n": n}


def flip_experiment(h_grid, boundary_samples: int, inner_replicas: int, seed: int = 0, d: int = 3,
                    constants: Optional[TruncationConstants] = None, z: float = 3.0) -> dict:
    """Compare ``P(G | boundary)`` with ``P(E, phi_x >= h | boundary)`` over a level grid.

    For every ``h``, the same ``boundary_samples`` midpoint configurations
    are used. A boundary passes when the simulated difference does not
    exceed ``z`` standard errors; the closed-form values are reported
    alongside and compared with the simulation.
    """
    c = constants or TruncationConstants()
    hs = [float(h) for h in np.atleast_1d(h_grid)]
    if any(not 0 < h <= 1 for h in hs):
        raise ValueError("levels must lie in (0, 1]")
    bnd = flip_boundary_samples(d, boundary_samples, stream(seed, "flip-boundary"))
    levels = []
    for h in hs:
        K = level_K(h, c.C0, c.c0)
        rows = []
        for i in range(boundary_samples):
            cf = flip_closed_form(bnd[i], h, K)
            mc = flip_monte_carlo(bnd[i], h, K, stream(seed, "flip", i, int(round(h * 1e6))), inner_replicas)
            se_g = max(mc["se_G"], 1.0 / inner_replicas)
            se_r = max(mc["se_E_and_high"], 1.0 / inner_replicas)
            rows.append({
                "boundary": i, "E": cf["E"], "beta": cf["beta"],
                "G_exact": cf["G"], "E_high_exact": cf["E_and_high"],
                "G_mc": mc["G"], "E_high_mc": mc["E_and_high"], "diff_mc": mc["diff"], "se_diff": mc["se_diff"],
                "holds": bool(mc["diff"] <= z * max(mc["se_diff"], 1.0 / inner_replicas)),
                "holds_exact": bool(cf["G"] <= cf["E_and_high"]),
                "z_G": (mc["G"] - cf["G"]) / se_g, "z_E_high": (mc["E_and_high"] - cf["E_and_high"]) / se_r,
            })
        levels.append({"h": h, "K": K, "all_hold": all(r["holds"] for r in rows),
                       "all_hold_exact": all(r["holds_exact"] for r in rows),
                       "max_abs_z": max(max(abs(r["z_G"]), abs(r["z_E_high"])) for r in rows),
                       "rows": rows})
    h1 = None
    for lv in levels:
        if lv["all_hold"]:
            h1 = lv["h"] if h1 is None else max(h1, lv["h"])
    return {"d": d, "seed": seed, "levels": levels, "h1": h1,
            "boundary_samples": boundary_samples, "inner_replicas": inner_replicas}
