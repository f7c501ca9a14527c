"""Discrete Gaussian free field on finite boxes.

Samplers
--------
``sample_gff``
    Zero boundary outside a rectangular box. The Dirichlet Laplacian
    ``2d I - A`` is diagonal in the tensor sine basis, so a sample is the
    orthonormal type-I DST of white noise scaled by ``lambda_k^(-1/2)``.
``sample_gff_dense``
    Cholesky factor of the killed Green function of an arbitrary finite set
    (up to 4096 vertices).
``sample_free_window``
    Restriction of the infinite-volume field to a finite window, using the
    Cholesky factor of ``g(x - y)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft
import scipy.linalg
import scipy.sparse.linalg

from .greens import dirichlet_laplacian, green_table, killed_green_matrix
from .lattice import Box, unit_directions

LOGGER = logging.getLogger(__name__)

DENSE_LIMIT = 4096

__all__ = [
    "VertexField",
    "MarkovSplit",
    "sample_gff",
    "sample_gff_batch",
    "sample_gff_dense",
    "sample_free_window",
    "markov_split",
    "conditional_sample",
    "empirical_covariance",
    "dirichlet_eigenvalues",
]


@dataclass
class VertexField:
    """Real field on the vertices of a box, stored with the box's shape."""

    box: Box
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.box.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def at(self, x) -> float:
        rel = np.asarray(x) - self.box.lo_array
        return float(self.values[tuple(rel)])

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass
class MarkovSplit:
    """Decomposition ``field = beta + bulk`` with respect to a set ``U``."""

    U: np.ndarray  # boolean mask over the box
    beta: VertexField
    bulk: VertexField


def dirichlet_eigenvalues(shape) -> np.ndarray:
    """Eigenvalues ``2d - 2 sum_i cos(pi k_i / (n_i + 1))`` on the box grid."""
    d = len(shape)
    lam = np.full(shape, 2.0 * d)
    for a, n in enumerate(shape):
        c = 2.0 * np.cos(np.pi * np.arange(1, n + 1) / (n + 1))
        sh = [1] * d
        sh[a] = n
        lam = lam - c.reshape(sh)
    return lam


def sample_gff_batch(shape, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent Dirichlet fields on a box of the given shape, ``(n, *shape)``."""
    shape = tuple(int(s) for s in shape)
    scale = 1.0 / np.sqrt(dirichlet_eigenvalues(shape))
    xi = rng.standard_normal((n,) + shape) * scale
    axes = tuple(range(1, len(shape) + 1))
    return scipy.fft.dstn(xi, type=1, norm="ortho", axes=axes)


def sample_gff(box: Box, rng: np.random.Generator) -> VertexField:
    """Exact sample of the zero-boundary GFF on ``box`` (spectral sine basis)."""
    vals = sample_gff_batch(box.shape, rng, 1)[0]
    return VertexField(box, vals, {"sampler": "spectral-dst1", "boundary": "dirichlet"})


def _points(U, box: Optional[Box]) -> np.ndarray:
    U = np.asarray(U)
    if U.dtype == bool:
        if box is None:
            raise ValueError("a mask needs its box")
        return box.coords(np.nonzero(U.ravel())[0])
    return np.atleast_2d(U.astype(np.int64))


def sample_gff_dense(U, rng: np.random.Generator, n: int = 1, box: Optional[Box] = None) -> np.ndarray:
    """Samples with covariance ``g_U`` via Cholesky, shape ``(n, |U|)``.

    Raises
    ------
    ValueError
        If ``|U|`` exceeds the dense limit.
    """
    pts = _points(U, box)
    if pts.shape[0] > DENSE_LIMIT:
        raise ValueError(f"dense sampler limited to {DENSE_LIMIT} vertices, got {pts.shape[0]}")
    chol = scipy.linalg.cholesky(killed_green_matrix(pts), lower=True)
    return rng.standard_normal((n, pts.shape[0])) @ chol.T


def sample_free_window(box: Box, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Infinite-volume field restricted to ``box``, shape ``(n, *box.shape)``."""
    if box.size > DENSE_LIMIT:
        raise ValueError(f"free-window sampler limited to {DENSE_LIMIT} vertices")
    pts = box.vertices()
    cov = green_table(box.dim).matrix(pts)
    chol = scipy.linalg.cholesky(cov, lower=True)
    out = rng.standard_normal((n, pts.shape[0])) @ chol.T
    return out.reshape((n,) + box.shape)


def _neighbour_sum_outside(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """For each vertex, sum of field values over neighbours outside ``mask`` (zero outside the box)."""
    d = values.ndim
    out = np.zeros_like(values)
    outside = np.where(mask, 0.0, values)
    for a in range(d):
        pad = [(0, 0)] * d
        pad[a] = (1, 1)
        p = np.pad(outside, pad)
        sl_lo = [slice(None)] * d
        sl_hi = [slice(None)] * d
        sl_lo[a] = slice(0, -2)
        sl_hi[a] = slice(2, None)
        out += p[tuple(sl_lo)] + p[tuple(sl_hi)]
    return out


def _harmonic_extension(values: np.ndarray, mask: np.ndarray, box: Box, tol: float) -> np.ndarray:
    beta = values.copy()
    idx = np.nonzero(mask.ravel())[0]
    if idx.size == 0:
        return beta
    pts = box.coords(idx)
    L = dirichlet_laplacian(pts)
    rhs = _neighbour_sum_outside(values, mask).ravel()[idx]
    sol = scipy.sparse.linalg.spsolve(L, rhs)
    resid = np.max(np.abs(L @ sol - rhs)) if idx.size else 0.0
    if resid > tol * max(1.0, np.abs(rhs).max()):
        raise RuntimeError(f"harmonic extension residual {resid:.3g} above tolerance")
    flat = beta.ravel()
    flat[idx] = sol
    return flat.reshape(values.shape)


def markov_split(field_: VertexField, U, tol: float = 1e-10) -> MarkovSplit:
    """Split a field into its harmonic extension inside ``U`` and the remainder.

    ``beta`` equals the field outside ``U`` and solves the discrete
    Dirichlet problem inside ``U`` (values outside the box count as zero);
    ``bulk = field - beta`` vanishes outside ``U``.
    """
    mask = _as_mask(U, field_.box)
    beta = _harmonic_extension(field_.values, mask, field_.box, tol)
    bulk = np.where(mask, field_.values - beta, 0.0)
    meta = dict(field_.meta)
    return MarkovSplit(mask, VertexField(field_.box, beta, meta), VertexField(field_.box, bulk, meta))


def _as_mask(U, box: Box) -> np.ndarray:
    U = np.asarray(U)
    if U.dtype == bool:
        return U.reshape(box.shape)
    mask = np.zeros(box.shape, dtype=bool)
    pts = np.atleast_2d(U.astype(np.int64))
    if pts.size:
        if not np.all(box.contains(pts)):
            raise ValueError("U must lie inside the field's box")
        mask[tuple((pts - box.lo_array).T)] = True
    return mask


def conditional_sample(boundary: VertexField, U, rng: np.random.Generator, tol: float = 1e-10) -> VertexField:
    """Resample the field inside ``U`` given its values outside.

    The result is ``beta + bulk`` with ``beta`` the harmonic extension of
    the outside values and ``bulk`` a fresh centred field with covariance
    ``g_U``.
    """
    mask = _as_mask(U, boundary.box)
    beta = _harmonic_extension(boundary.values, mask, boundary.box, tol)
    idx = np.nonzero(mask.ravel())[0]
    out = beta.ravel().copy()
    if idx.size:
        pts = boundary.box.coords(idx)
        out[idx] += sample_gff_dense(pts, rng, 1)[0]
    meta = dict(boundary.meta, sampler="conditional-dense")
    return VertexField(boundary.box, out.reshape(boundary.box.shape), meta)


def empirical_covariance(samples, pairs, box: Optional[Box] = None) -> dict:
    """Covariance estimates with standard errors for a list of vertex pairs.

    Parameters
    ----------
    samples : array ``(n, ...)`` or sequence of :class:`VertexField`
        Replicated fields; if arrays, trailing axes are the box shape or a
        flat vertex axis.
    pairs : list of (x, y)
        Vertex pairs, given as coordinates when ``box`` is known and as flat
        indices otherwise.

    Returns
    -------
    dict
        Arrays ``cov`` and ``se`` aligned with ``pairs`` and the sample count.
    """
    if len(samples) and isinstance(samples[0], VertexField):
        box = samples[0].box
        arr = np.stack([s.flat() for s in samples])
    else:
        arr = np.asarray(samples, dtype=float)
        arr = arr.reshape(arr.shape[0], -1)
    n = arr.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")

    def flat_index(p):
        if box is not None:
            return int(box.index(np.asarray(p)))
        return int(p)

    mean = arr.mean(axis=0)
    cov, se = [], []
    for x, y in pairs:
        i, j = flat_index(x), flat_index(y)
        prod = (arr[:, i] - mean[i]) * (arr[:, j] - mean[j])
        cov.append(prod.sum() / (n - 1))
        se.append(prod.std(ddof=1) / np.sqrt(n))
    return {"cov": np.asarray(cov), "se": np.asarray(se), "n": n}


def neighbour_mean(values: np.ndarray, x) -> float:
    """Average of the ``2d`` neighbours of ``x`` (zero outside the array)."""
    d = values.ndim
    acc = 0.0
    for v in unit_directions(d):
        y = np.asarray(x) + v
        if np.all(y >= 0) and np.all(y < values.shape):
            acc += values[tuple(y)]
    return acc / (2 * d)
