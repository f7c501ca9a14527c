"""Isomorphism between interlacement local times and two free fields.

``l_{x,u} + gamma_x^2 / 2`` has the law of ``(phi_x + sqrt(2u))^2 / 2`` when
``l`` is the interlacement local time, ``gamma`` an independent free field
and ``phi`` a free field. This module checks the identity in law, builds
``phi`` from ``(l, gamma)`` with a cluster sign rule, and samples the
Bernoulli edge marks that control the field along edges.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy import stats

from .cable import EDGE_BRIDGE, TruncationLevels, edge_marks
from .gff import VertexField
from .greens import green_table
from .interlace import LocalTimes, edge_trace, local_time_field, sample_interlacement
from .lattice import Box, edge_array
from .perc import components

LOGGER = logging.getLogger(__name__)

__all__ = [
    "IsoTriple",
    "iso_identity_residual",
    "verify_iso_moments",
    "couple_sign_rule",
    "theta_coupling",
    "FreeWindowSampler",
    "moment_z",
    "sign_rule_sample",
    "sign_rule_experiment",
    "excursion_reach",
    "cable_edge_open",
]


@dataclass
class IsoTriple:
    """Fields related by ``(phi + sqrt(2u))^2 / 2 = l + gamma^2 / 2``."""

    u: float
    phi: VertexField
    gamma: VertexField
    ell: LocalTimes
    provenance: dict = field(default_factory=lambda: {"sampled": ["ell", "gamma"], "derived": ["phi"]})

    def residual(self) -> float:
        return iso_identity_residual(self.phi.values, self.gamma.values, self.ell.values, self.u)


def iso_identity_residual(phi, gamma, ell, u: float) -> float:
    lhs = 0.5 * (np.asarray(phi) + math.sqrt(2 * u)) ** 2
    rhs = np.asarray(ell) + 0.5 * np.asarray(gamma) ** 2
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


class FreeWindowSampler:
    """Infinite-volume free field restricted to a box, via a cached Cholesky factor."""

    def __init__(self, box: Box):
        self.box = box
        cov = green_table(box.dim).matrix(box.vertices())
        self.chol = scipy.linalg.cholesky(cov, lower=True)

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        z = rng.standard_normal((n, self.box.size))
        return (z @ self.chol.T).reshape((n,) + self.box.shape)


def moment_z(a: np.ndarray, b: Optional[np.ndarray] = None, target: Optional[float] = None, kind: str = "mean") -> float:
    """z-score of a mean or variance, against a target value or a second sample."""

    def est(x):
        x = np.asarray(x, float)
        n = x.size
        if kind == "mean":
            return x.mean(), x.var(ddof=1) / n
        c = x - x.mean()
        v = c.var(ddof=1)
        m4 = np.mean(c ** 4)
        return v, max(m4 - v * v, 1e-300) / n

    ma, va = est(a)
    if b is None:
        return float((ma - target) / math.sqrt(va))
    mb, vb = est(b)
    return float((ma - mb) / math.sqrt(va + vb))


def _se_mean(x) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))


def _se_var(x) -> float:
    c = np.asarray(x, float) - np.mean(x)
    v = c.var(ddof=1)
    return float(math.sqrt(max(np.mean(c ** 4) - v * v, 0.0) / c.size))


def verify_iso_moments(u: float, replicas: int, rng: np.random.Generator, d: int = 3,
                       halo_factor: float = 2.0) -> dict:
    """Sample both sides of the identity independently at a single vertex.

    Left side: ``l_0 + gamma_0^2 / 2`` with ``l`` from an interlacement
    hitting a one-vertex window and ``gamma_0 ~ N(0, g(0))``. Right side:
    ``(phi_0 + sqrt(2u))^2 / 2`` with ``phi_0 ~ N(0, g(0))``.
    """
    g0 = green_table(d).value(np.zeros(d, dtype=np.int64))
    win = Box((0,) * d, (1,) * d)
    ell = np.empty(replicas)
    for k in range(replicas):
        s = sample_interlacement(win, u, rng, halo_factor=halo_factor)
        ell[k] = local_time_field(s).values.ravel()[0]
    gam = rng.standard_normal(replicas) * math.sqrt(g0)
    phi = rng.standard_normal(replicas) * math.sqrt(g0)
    lhs = ell + 0.5 * gam ** 2
    rhs = 0.5 * (phi + math.sqrt(2 * u)) ** 2
    mean_t = u + g0 / 2
    var_t = 2 * u * g0 + 0.5 * g0 ** 2
    ks = stats.ks_2samp(lhs, rhs)
    return {
        "u": u, "d": d, "replicas": replicas, "g0": g0,
        "mean_theory": mean_t, "var_theory": var_t,
        "lhs_mean": float(lhs.mean()), "rhs_mean": float(rhs.mean()),
        "lhs_var": float(lhs.var(ddof=1)), "rhs_var": float(rhs.var(ddof=1)),
        "z_mean_lhs": moment_z(lhs, target=mean_t), "z_mean_rhs": moment_z(rhs, target=mean_t),
        "z_mean_diff": moment_z(lhs, rhs),
        "z_var_lhs": moment_z(lhs, target=var_t, kind="var"),
        "z_var_rhs": moment_z(rhs, target=var_t, kind="var"),
        "z_var_diff": moment_z(lhs, rhs, kind="var"),
        "lhs_mean_se": _se_mean(lhs), "rhs_mean_se": _se_mean(rhs),
        "lhs_var_se": _se_var(lhs), "rhs_var_se": _se_var(rhs),
        "ell_mean": float(ell.mean()), "ell_mean_se": _se_mean(ell), "z_ell_mean": moment_z(ell, target=u),
        "ks_stat": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
    }


def excursion_reach(ell, rng: np.random.Generator, tau: float = 1.0) -> np.ndarray:
    """Furthest point reached along an edge by the excursions from an endpoint that return to it.

    With local time ``l`` at the endpoint, the reach ``A`` (in units where
    the bridge variance grows at rate one along the edge) satisfies
    ``P(A < t) = exp(-l (1/t - 1/tau))`` on ``(0, tau]``; ``A = 0`` when ``l = 0``.
    """
    ell = np.asarray(ell, float)
    u = rng.random(ell.shape)
    with np.errstate(divide="ignore"):
        inv = 1.0 / tau - np.log(u) / ell
    return np.where(ell > 0, 1.0 / inv, 0.0)


def cable_edge_open(ell_x, ell_y, gamma_x, gamma_y, rng: np.random.Generator, tau: float = 1.0) -> np.ndarray:
    """Sample whether ``2 l + gamma^2`` stays positive along edges that no trajectory traversed.

    Local time covers ``[0, A)`` from ``x`` and ``(tau - B, tau]`` from
    ``y`` (see :func:`excursion_reach`). The edge is open when the two
    stretches meet, or else when the bridge of ``gamma`` has no zero on the
    gap, which is sampled through its values at both ends of the gap.
    """
    gx = np.asarray(gamma_x, float)
    gy = np.asarray(gamma_y, float)
    a = excursion_reach(ell_x, rng, tau)
    b = excursion_reach(ell_y, rng, tau)
    s1 = a
    s2 = np.maximum(tau - b, s1)
    covered = s2 - s1 <= 0
    # bridge from (0, gx) to (tau, gy) at s1, then from (s1, g1) to (tau, gy) at s2
    z = rng.standard_normal((2,) + gx.shape)
    g1 = gx + (gy - gx) * s1 / tau + np.sqrt(s1 * (tau - s1) / tau) * z[0]
    r = tau - s1
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(r > 0, (s2 - s1) / r, 1.0)
        g2 = g1 + (gy - g1) * frac + np.sqrt(np.maximum((s2 - s1) * (tau - s2) / np.where(r > 0, r, 1.0), 0.0)) * z[1]
        p = np.where(g1 * g2 > 0, -np.expm1(-2.0 * g1 * g2 / np.where(covered, 1.0, s2 - s1)), 0.0)
    return covered | (rng.random(gx.shape) < p)


def couple_sign_rule(ell: LocalTimes, gamma: VertexField, u: float, rng: np.random.Generator,
                     traversed: Optional[tuple] = None) -> dict:
    """Build ``phi = sigma_C sqrt(2 l + gamma^2) - sqrt(2u)`` with one sign per cluster.

    Clusters are the components of the graph whose edges are those
    traversed by a trajectory, together with the edges along which
    ``2 l + gamma^2`` stays positive on the cable (see
    :func:`cable_edge_open`; between unoccupied vertices this is the bridge
    of ``gamma`` avoiding zero, probability ``1 - exp(-2 gamma_x gamma_y)``
    for equal signs and never otherwise).
    Clusters meeting the occupied set get ``+1``; the others take the sign
    of ``gamma``, which is constant on them.

    Parameters
    ----------
    traversed : (src, dst) index arrays, optional
        Edges traversed by the interlacement, in row-major indices of the box.
    """
    box = ell.box
    if gamma.box.shape != box.shape:
        raise ValueError("local times and gamma must share a box")
    lv = ell.values.ravel()
    gv = gamma.values.ravel()
    src, dst, _ = edge_array(box)
    tau = EDGE_BRIDGE[0] * EDGE_BRIDGE[1]
    open_ = cable_edge_open(lv[src], lv[dst], gv[src], gv[dst], rng, tau)
    s = [src[open_]]
    t = [dst[open_]]
    if traversed is not None:
        s.append(np.asarray(traversed[0]))
        t.append(np.asarray(traversed[1]))
    lab = components(box.size, np.concatenate(s), np.concatenate(t))
    occ = lv > 0
    occupied_comp = np.zeros(lab.max() + 1, dtype=bool)
    occupied_comp[lab[occ]] = True
    # sign of gamma on each unoccupied component; check constancy
    sg = np.sign(gv)
    zero = sg == 0
    if zero.any():
        LOGGER.warning("%d exact zeros in gamma resampled to a sign", int(zero.sum()))
        sg[zero] = np.where(rng.random(int(zero.sum())) < 0.5, -1.0, 1.0)
    smin = np.full(lab.max() + 1, np.inf)
    smax = np.full(lab.max() + 1, -np.inf)
    np.minimum.at(smin, lab, sg)
    np.maximum.at(smax, lab, sg)
    mixed = (~occupied_comp) & (smin != smax)
    if mixed.any():
        raise RuntimeError("an unoccupied cluster carries both signs of gamma")
    sigma = np.where(occupied_comp[lab], 1.0, sg)
    rho = np.sqrt(2 * lv + gv ** 2)
    phi = sigma * rho - math.sqrt(2 * u)
    phi_f = VertexField(box, phi.reshape(box.shape), {"sampler": "sign-rule", "u": u})
    triple = IsoTriple(u, phi_f, gamma, ell)
    return {"phi": phi_f, "labels": lab.reshape(box.shape), "occupied": occ.reshape(box.shape),
            "triple": triple}


def sign_rule_sample(window: Box, u: float, rng: np.random.Generator, gamma_sampler: FreeWindowSampler,
                     halo_factor: float = 2.0) -> dict:
    """Fresh ``(l, gamma)`` on ``window`` and the sign-rule field built from them."""
    s = sample_interlacement(window, u, rng, halo_factor=halo_factor)
    ell = local_time_field(s)
    _, src, dst = edge_trace(s, window)
    gam = VertexField(window, gamma_sampler.sample(rng)[0], {"sampler": "free-window"})
    return couple_sign_rule(ell, gam, u, rng, (src, dst))


def theta_coupling(phi: VertexField, levels: TruncationLevels, rng: np.random.Generator) -> dict:
    """Bernoulli edge marks ``theta`` with band ``K(h) - K~(u)`` and the implication check.

    Raises
    ------
    ValueError
        When the configured constants violate the compatibility inequality.
    """
    if not levels.compatible:
        raise ValueError(
            f"constants incompatible at h={levels.h}, u={levels.u}: K={levels.K:.4f} is below "
            f"K~ + sqrt(-log((1-p)/2)/2) with K~={levels.K_tilde:.4f}, p={levels.p:.4f}")
    src, dst, axis = edge_array(phi.box)
    v = phi.values.ravel()
    m = edge_marks(v[src], v[dst], levels, rng)
    inner = (np.abs(v[src]) <= levels.K_tilde) & (np.abs(v[dst]) <= levels.K_tilde)
    violations = int(np.sum(inner & m["theta"] & ~m["within_band"]))
    a = levels.theta_band
    bound = 1.0 - 2.0 * math.exp(-2.0 * a * a)
    n = src.size
    mean = float(m["theta"].mean()) if n else float("nan")
    se = math.sqrt(max(mean * (1 - mean), 1.0 / max(n, 1)) / max(n, 1))
    return {"theta": m["theta"], "within_band": m["within_band"], "src": src, "dst": dst,
            "p_theta": float(m["p_theta"]), "union_bound": bound, "p_target": levels.p,
            "theta_mean": mean, "theta_se": se, "implication_violations": violations,
            "edges_checked": int(inner.sum())}


def sign_rule_experiment(u: float, side: int, replicas: int, seed: int, d: int = 3,
                         halo_factor: float = 2.0) -> dict:
    """Repeat :func:`sign_rule_sample` on a cube and test the output field.

    Checks that ``phi > -sqrt(2u)`` on every occupied vertex (exactly, no
    tolerance) and compares the value at the central vertex with the
    ``N(0, g(0))`` marginal of the free field by a Kolmogorov-Smirnov test.
    Replica ``k`` uses the stream ``(seed, "sign-rule", k)``.
    """
    from .streams import stream

    window = Box((0,) * d, (side,) * d)
    sampler = FreeWindowSampler(window)
    g0 = green_table(d).value(np.zeros(d, dtype=np.int64))
    c = (side // 2,) * d
    centre = np.empty(replicas)
    violations = 0
    occupied = 0
    residual = 0.0
    last = None
    for k in range(replicas):
        out = sign_rule_sample(window, u, stream(seed, "sign-rule", k), sampler, halo_factor)
        phi = out["phi"].values
        occ = out["occupied"]
        violations += int(np.sum(phi[occ] <= -math.sqrt(2 * u)))
        occupied += int(occ.sum())
        residual = max(residual, out["triple"].residual())
        centre[k] = phi[c]
        last = out["phi"]
    ks = stats.kstest(centre / math.sqrt(g0), "norm")
    return {"u": u, "side": side, "replicas": replicas, "seed": seed, "g0": g0,
            "occupied_vertices": occupied, "violations": violations, "max_identity_residual": residual,
            "centre_mean": float(centre.mean()), "centre_mean_se": _se_mean(centre),
            "centre_var": float(centre.var(ddof=1)), "centre_var_se": _se_var(centre),
            "z_centre_var": moment_z(centre, target=g0, kind="var"),
            "ks_stat": float(ks.statistic), "ks_pvalue": float(ks.pvalue), "last_field": last}
