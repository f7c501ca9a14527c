"""Lattice Green functions, killed Green functions and capacities.

Normalisation used throughout the package: ``g(x, y)`` is ``1/(2d)`` times
the expected number of visits to ``y`` of the discrete simple random walk
started at ``x``. Equivalently, every covariance is an entry of the inverse
of ``2d I - A`` where ``A`` is the adjacency matrix, restricted to the set
on which the walk is alive.

Two independent quadratures of the free Green function are provided:

* :func:`green_zd` integrates the Fourier representation. The last
  momentum variable is integrated in closed form and the remaining
  ``(d-1)``-dimensional integral, which has an integrable ``1/|k|``
  singularity at the origin, is regularised by a Duffy (pyramid)
  substitution and evaluated by tensor Gauss-Legendre rules of increasing
  order until two successive orders agree to the requested tolerance.
* :class:`GreenTable` fills its cache from the heat-kernel representation
  ``G(x) = int_0^inf prod_i ive(x_i, t/d) dt``, integrated with the
  trapezoidal rule in ``log t`` plus an asymptotic tail.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.special import ive, roots_legendre

LOGGER = logging.getLogger(__name__)

__all__ = [
    "green_zd",
    "green_visits",
    "GreenTable",
    "green_table",
    "killed_green",
    "killed_green_matrix",
    "dirichlet_laplacian",
    "EquilibriumMeasure",
    "equilibrium",
    "outer_boundary",
    "sigma0_sq",
    "visit_count_estimate",
    "save_green_table",
    "load_green_table",
]


class QuadratureError(RuntimeError):
    """Requested accuracy could not be reached."""


# ---------------------------------------------------------------------------
# Fourier route
# ---------------------------------------------------------------------------

def _duffy_nodes(m: int, n: int):
    """Nodes and weights on ``[0, pi]^m`` clustered at the origin corner.

    The cube is split into ``m`` pyramids according to the largest
    coordinate; on each, ``k_j = r`` and ``k_i = r s_i`` with Jacobian
    ``r^(m-1)``, which cancels the ``1/|k|`` singularity.
    """
    x, w = roots_legendre(n)
    r = 0.5 * np.pi * (x + 1.0)
    wr = 0.5 * np.pi * w
    s = 0.5 * (x + 1.0)
    ws = 0.5 * w
    grids = np.meshgrid(*([r] + [s] * (m - 1)), indexing="ij")
    wgrid = np.meshgrid(*([wr] + [ws] * (m - 1)), indexing="ij")
    rr = grids[0].ravel()
    weight = np.prod([g.ravel() for g in wgrid], axis=0) * rr ** (m - 1)
    svals = [g.ravel() for g in grids[1:]]
    pts, wts = [], []
    for j in range(m):
        k = np.empty((m, rr.size))
        k[j] = rr
        it = iter(svals)
        for i in range(m):
            if i != j:
                k[i] = rr * next(it)
        pts.append(k)
        wts.append(weight)
    return np.concatenate(pts, axis=1), np.concatenate(wts)


def _fourier_estimate(x: np.ndarray, d: int, n: int) -> float:
    m = d - 1
    k, w = _duffy_nodes(m, n)
    # a - 1 = sum_i (1 - cos k_i), written without cancellation
    am1 = np.sum(2.0 * np.sin(0.5 * k) ** 2, axis=0)
    sq = np.sqrt(am1 * (am1 + 2.0))
    a = 1.0 + am1
    z = a - sq
    val = np.prod(np.cos(k * x[:m, None]), axis=0) * z ** x[m] / sq
    return float(d * np.pi ** (-m) * np.dot(w, val))


def green_visits_fourier(x, d: int, tol: float = 1e-8, n_max: Optional[int] = None) -> float:
    """Expected number of visits to ``x`` by the walk from 0 (Fourier quadrature)."""
    if d < 3:
        raise ValueError("Green function requires d >= 3")
    x = np.sort(np.abs(np.asarray(x, dtype=np.int64)))
    if x.size != d:
        raise ValueError("displacement has wrong dimension")
    if n_max is None:
        n_max = 1024 if d == 3 else (160 if d == 4 else 48)
    n = 16
    prev = _fourier_estimate(x, d, n)
    while True:
        n2 = int(n * 1.5)
        if n2 > n_max:
            raise QuadratureError(
                f"Fourier quadrature for x={tuple(x)} did not reach tol={tol} "
                f"within {n_max} nodes per axis (last change {abs(cur - prev) if n > 16 else np.nan})")
        cur = _fourier_estimate(x, d, n2)
        if abs(cur - prev) < tol:
            return cur
        prev, n = cur, n2


def green_zd(x, d: int, tol: float = 1e-8) -> float:
    """Free Green function ``g(0, x)`` in the ``1/(2d)`` normalisation.

    Parameters
    ----------
    x : sequence of int
        Displacement vector.
    d : int
        Dimension, at least 3.
    tol : float
        Absolute tolerance on ``g``.

    Raises
    ------
    QuadratureError
        When the tolerance cannot be met at the maximal quadrature order.
    """
    return green_visits_fourier(x, d, tol * 2 * d) / (2 * d)


# ---------------------------------------------------------------------------
# Heat-kernel route and cached table
# ---------------------------------------------------------------------------

def _bessel_series_coeffs(n: np.ndarray, order: int = 3) -> np.ndarray:
    """Coefficients of ``sqrt(2 pi z) ive(n, z) ~ sum_k c_k z^-k``."""
    mu = 4.0 * n.astype(float) ** 2
    out = np.empty((order,) + n.shape)
    term = np.ones(n.shape)
    out[0] = 1.0
    for k in range(1, order):
        term = term * -(mu - (2 * k - 1) ** 2) / (k * 8.0)
        out[k] = term
    return out


def green_visits_heat(disps: np.ndarray, d: int, step: float = 0.02) -> np.ndarray:
    """Expected visits for many displacements via ``int_0^inf prod ive(x_i, t/d) dt``.

    The integral is split at ``T`` (large compared with ``|x|^2``); below
    ``T`` it is a trapezoidal sum in ``s = log t``, above ``T`` the
    large-argument expansion of ``ive`` is integrated term by term.
    """
    disps = np.abs(np.atleast_2d(np.asarray(disps, dtype=np.int64)))
    nmax = int(disps.max()) if disps.size else 0
    T = max(1e8, 1e4 * (nmax + 1) ** 2 * d)
    n_nodes = int(np.ceil((np.log(T) + 30.0) / step)) + 1
    s, h = np.linspace(-30.0, np.log(T), n_nodes, retstep=True)
    t = np.exp(s)
    w = np.full(n_nodes, h) * t
    w[0] *= 0.5
    w[-1] *= 0.5
    table = ive(np.arange(nmax + 1)[:, None], t[None, :] / d)
    coeffs = _bessel_series_coeffs(np.arange(nmax + 1)).T  # (nmax+1, order)
    order = coeffs.shape[1]
    pref = (2 * np.pi / d) ** (-d / 2)
    out = np.empty(disps.shape[0])
    chunk = max(1, 4_000_000 // n_nodes)
    for i0 in range(0, disps.shape[0], chunk):
        block = disps[i0:i0 + chunk]
        prod = table[block[:, 0]]
        for a in range(1, d):
            prod = prod * table[block[:, a]]
        body = prod @ w
        # tail above T: prod_a (2 pi t/d)^(-1/2) sum_k c_k(x_a) (d/t)^k
        poly = np.zeros((block.shape[0], order))
        poly[:, 0] = 1.0
        for a in range(d):
            ca = coeffs[block[:, a]]
            new = np.zeros_like(poly)
            for k in range(order):
                for j in range(k + 1):
                    new[:, k] += poly[:, j] * ca[:, k - j]
            poly = new
        tail = np.zeros(block.shape[0])
        for k in range(order):
            p = d / 2 + k
            tail += poly[:, k] * d ** k * T ** (1 - p) / (p - 1)
        out[i0:i0 + chunk] = body + pref * tail
    return out


def _canonical(disps: np.ndarray) -> np.ndarray:
    return -np.sort(-np.abs(disps), axis=-1)


_KEY_BASE = np.int64(1 << 20)


def _keys(canon: np.ndarray) -> np.ndarray:
    k = np.zeros(canon.shape[:-1], dtype=np.int64)
    for a in range(canon.shape[-1]):
        k = k * _KEY_BASE + canon[..., a]
    return k


class GreenTable:
    """Cache of ``g(x)`` keyed by canonical displacement (sorted absolute coordinates).

    Values are produced lazily from the heat-kernel quadrature. The table
    is append-only; reads never mutate existing values.
    """

    def __init__(self, d: int, tol: float = 1e-8):
        if d < 3:
            raise ValueError("Green function requires d >= 3")
        self.d = d
        self.tol = tol
        self._keys = np.zeros(0, dtype=np.int64)
        self._vals = np.zeros(0)
        self._dense = {}

    def __len__(self):
        return self._keys.size

    def _ensure(self, canon: np.ndarray):
        flat = canon.reshape(-1, self.d)
        keys = _keys(flat)
        uk, first = np.unique(keys, return_index=True)
        pos = np.searchsorted(self._keys, uk)
        pos = np.minimum(pos, max(self._keys.size - 1, 0))
        known = (self._keys.size > 0) & (self._keys[pos] == uk) if self._keys.size else np.zeros(uk.size, bool)
        missing = ~known
        if missing.any():
            new = flat[first[missing]]
            vals = green_visits_heat(new, self.d) / (2 * self.d)
            allk = np.concatenate([self._keys, uk[missing]])
            allv = np.concatenate([self._vals, vals])
            order = np.argsort(allk, kind="stable")
            self._keys, self._vals = allk[order], allv[order]

    def values(self, disps) -> np.ndarray:
        """``g`` at an array of displacements with trailing axis ``d``."""
        disps = np.asarray(disps, dtype=np.int64)
        canon = _canonical(disps)
        self._ensure(canon)
        keys = _keys(canon)
        return self._vals[np.searchsorted(self._keys, keys)]

    def value(self, x) -> float:
        return float(self.values(np.asarray(x)[None, :])[0])

    def matrix(self, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        """Matrix ``g(a_i - b_j)``."""
        b = a if b is None else b
        return self.values(np.asarray(a)[:, None, :] - np.asarray(b)[None, :, :])

    def dense(self, radius: int) -> np.ndarray:
        """Array ``G[x + radius]`` of ``g(x)`` for ``|x|_inf <= radius``."""
        if radius not in self._dense:
            ax = np.arange(-radius, radius + 1)
            grid = np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1)
            self._dense[radius] = self.values(grid)
        return self._dense[radius]


@functools.lru_cache(maxsize=None)
def green_table(d: int) -> GreenTable:
    """Process-wide shared table for dimension ``d``."""
    return GreenTable(d)


def green_visits(x, d: int) -> float:
    """Expected visits ``2d g(x)`` from the shared table."""
    return 2 * d * green_table(d).value(np.asarray(x))


def save_green_table(table: GreenTable, path) -> None:
    from .io import write_green_table
    write_green_table(path, table)


def load_green_table(path) -> GreenTable:
    from .io import read_green_table
    return read_green_table(path)


# ---------------------------------------------------------------------------
# Killed Green function
# ---------------------------------------------------------------------------

def _as_points(U) -> np.ndarray:
    U = np.asarray(U, dtype=np.int64)
    if U.ndim == 1:
        U = U[None, :]
    return U


def _point_index(U: np.ndarray):
    lo = U.min(axis=0)
    shape = tuple(U.max(axis=0) - lo + 3)
    lookup = -np.ones(shape, dtype=np.int64)
    lookup[tuple((U - lo + 1).T)] = np.arange(U.shape[0])
    return lo - 1, lookup


def dirichlet_laplacian(U) -> scipy.sparse.csr_matrix:
    """Sparse ``2d I - A`` restricted to the finite vertex set ``U`` (rows in input order)."""
    U = _as_points(U)
    n, d = U.shape
    origin, lookup = _point_index(U)
    rows, cols = [], []
    for a in range(d):
        e = np.zeros(d, dtype=np.int64)
        e[a] = 1
        nb = lookup[tuple((U + e - origin).T)]
        ok = nb >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(nb[ok])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    adj = scipy.sparse.coo_matrix((np.ones(r.size), (r, c)), shape=(n, n))
    adj = adj + adj.T
    return (scipy.sparse.identity(n) * (2 * d) - adj).tocsc()


def killed_green_matrix(U) -> np.ndarray:
    """Dense ``g_U`` on a finite set: inverse of ``2d I - A_U``."""
    L = dirichlet_laplacian(U).toarray()
    return scipy.linalg.inv(L)


def killed_green(U, x, y) -> float:
    """Green function of the walk killed on leaving ``U``, between ``x, y`` in ``U``."""
    U = _as_points(U)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    ix = np.nonzero(np.all(U == x, axis=1))[0]
    iy = np.nonzero(np.all(U == y, axis=1))[0]
    if ix.size == 0 or iy.size == 0:
        raise ValueError("killed_green requires both points inside U")
    L = dirichlet_laplacian(U)
    rhs = np.zeros(U.shape[0])
    rhs[iy[0]] = 1.0
    sol = scipy.sparse.linalg.spsolve(L, rhs)
    return float(np.atleast_1d(sol)[ix[0]])


# ---------------------------------------------------------------------------
# Equilibrium measure
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumMeasure:
    """Equilibrium measure of a finite set.

    Attributes
    ----------
    support : (n, d) int array
        The set ``A``.
    weights : (n,) float array
        ``e_A(x)``, zero away from the outer boundary of ``A``.
    capacity : float
        Total mass.
    """

    support: np.ndarray
    weights: np.ndarray
    capacity: float

    def boundary(self):
        keep = self.weights > 0
        return self.support[keep], self.weights[keep]


def outer_boundary(A) -> np.ndarray:
    """Mask of points of ``A`` having at least one neighbour outside ``A``."""
    A = _as_points(A)
    origin, lookup = _point_index(A)
    d = A.shape[1]
    mask = np.zeros(A.shape[0], dtype=bool)
    for a in range(d):
        for s in (1, -1):
            e = np.zeros(d, dtype=np.int64)
            e[a] = s
            mask |= lookup[tuple((A + e - origin).T)] < 0
    return mask


def equilibrium(A, d: Optional[int] = None, table: Optional[GreenTable] = None,
                rtol: float = 1e-8) -> EquilibriumMeasure:
    """Solve ``sum_x e_A(x) g(x, y) = 1`` for ``y`` in ``A``.

    Only the outer boundary of ``A`` can carry mass (a walk entering ``A``
    from outside enters through it), so the linear system is solved there.

    Raises
    ------
    ValueError
        For an empty set.
    np.linalg.LinAlgError
        If the system is too ill-conditioned to meet ``rtol``.
    """
    A = np.unique(_as_points(A), axis=0)
    if A.shape[0] == 0:
        raise ValueError("equilibrium measure of the empty set")
    d = A.shape[1] if d is None else d
    table = green_table(d) if table is None else table
    bmask = outer_boundary(A)
    B = A[bmask]
    G = table.matrix(B)
    try:
        cf = scipy.linalg.cho_factor(G)
        e = scipy.linalg.cho_solve(cf, np.ones(B.shape[0]))
    except np.linalg.LinAlgError:
        e = np.linalg.solve(G, np.ones(B.shape[0]))
    resid = np.max(np.abs(G @ e - 1.0))
    if resid > rtol * max(1.0, np.abs(e).sum()):
        raise np.linalg.LinAlgError(f"equilibrium solve residual {resid:.3g} exceeds tolerance")
    if np.any(e < -1e-9):
        LOGGER.warning("equilibrium weights slightly negative (min %.3g), clipped", e.min())
    w = np.zeros(A.shape[0])
    w[bmask] = np.clip(e, 0.0, None)
    return EquilibriumMeasure(A, w, float(w.sum()))


def sigma0_sq(d: int) -> float:
    """Variance of the field at a vertex given the midpoints of its ``2d`` edges.

    The star of ``2d`` half-edges (cable length ``1/4`` each, Brownian
    variance 2 per unit length) has effective resistance ``(2 * 1/4) / 2d``.
    """
    if d < 3:
        raise ValueError("d >= 3 required")
    return 1.0 / (4 * d)


# ---------------------------------------------------------------------------
# Monte Carlo oracle
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _origin_visits(n_walks, length, d, seed):
    np.random.seed(seed)
    out = np.empty(n_walks, dtype=np.int64)
    pos = np.zeros(d, dtype=np.int64)
    for w in range(n_walks):
        pos[:] = 0
        count = 1
        for _ in range(length):
            k = np.random.randint(0, 2 * d)
            pos[k >> 1] += 1 - 2 * (k & 1)
            at0 = True
            for a in range(d):
                if pos[a] != 0:
                    at0 = False
                    break
            if at0:
                count += 1
        out[w] = count
    return out


def visit_tail(d: int, length: int) -> float:
    """Expected visits to the origin after step ``length`` from the local limit theorem.

    Returns are only possible at even times ``2k`` where the return probability
    is ``2 (d / (4 pi k))^(d/2)`` to leading order; the sum over ``k > length/2``
    is evaluated by the midpoint rule.
    """
    K = length // 2
    p = d / 2.0
    return 2.0 * (d / (4.0 * np.pi)) ** p * (K + 0.5) ** (1.0 - p) / (p - 1.0)


def visit_count_estimate(d: int, total_steps: int, length: int, seed: int = 0) -> dict:
    """Expected visits to the origin by the walk from the origin, by simulation.

    ``total_steps / length`` independent walks of ``length`` steps each count
    their visits (time 0 included); the unobserved tail is added from
    :func:`visit_tail`. Returns ``mean``, ``se``, ``tail`` and ``walks``.
    """
    if d < 3:
        raise ValueError("d >= 3 required")
    n = max(2, int(total_steps // length))
    counts = _origin_visits(n, int(length), int(d), int(seed))
    tail = visit_tail(d, length)
    return {"mean": float(counts.mean()) + tail, "se": float(counts.std(ddof=1) / np.sqrt(n)),
            "tail": tail, "walks": n, "steps": n * int(length)}
