"""Brownian bridges on the cable system and exact edge events.

Along an edge of cable length ``1/2`` the field is a Brownian bridge between
its endpoint values, driven by a Brownian motion of variance ``2`` per unit
time. Every edge event used by the percolation code depends on the bridge
only through its extrema, whose laws are explicit:

* one-sided:  ``P(sup B >= M) = exp(-2 (M - x)(M - y) / (l sigma^2))``;
* two-sided:  method of images for the strip ``(lo, hi)``.

All probabilities depend on ``(l, sigma^2)`` only through ``tau = l sigma^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lattice import Edge

__all__ = [
    "BridgeSpec",
    "EDGE_BRIDGE",
    "QUARTER_BRIDGE",
    "bridge_sup_tail",
    "bridge_stays_above",
    "bridge_interval_prob",
    "bridge_band_prob",
    "discretize_bridge",
    "discrete_extreme_estimate",
    "TruncationConstants",
    "TruncationLevels",
    "truncation_levels",
    "CableEdgeState",
    "sample_edge_marks",
    "edge_marks",
    "stays_above_prob",
    "midpoint_sample",
    "SERIES_CUTOFF",
    "BGK_SHIFT",
]

SERIES_CUTOFF = 1e-12
# Continuity correction for monitoring a Brownian extremum on a grid:
# -zeta(1/2)/sqrt(2 pi).
BGK_SHIFT = 0.5825971579390106


@dataclass(frozen=True)
class BridgeSpec:
    """Brownian bridge from ``x`` to ``y`` over time ``length`` with variance rate ``var``."""

    x: float
    y: float
    length: float = 0.5
    var: float = 2.0

    def __post_init__(self):
        if not (self.length > 0 and self.var > 0):
            raise ValueError("bridge length and variance must be positive")

    @property
    def tau(self) -> float:
        return self.length * self.var


EDGE_BRIDGE = (0.5, 2.0)
QUARTER_BRIDGE = (0.25, 2.0)


def bridge_sup_tail(spec: BridgeSpec, M: float) -> float:
    """``P(max_t B_t >= M)`` for ``M >= max(x, y)``.

    Raises
    ------
    ValueError
        If ``M`` is below an endpoint.
    """
    if M < max(spec.x, spec.y):
        raise ValueError(f"level M={M} below an endpoint ({spec.x}, {spec.y})")
    return math.exp(-2.0 * (M - spec.x) * (M - spec.y) / spec.tau)


def stays_above_prob(x, y, level, tau: float = 1.0):
    """Vectorised ``P(min B >= level)``; zero when an endpoint is below ``level``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = x - level
    b = y - level
    out = -np.expm1(-2.0 * np.clip(a, 0, None) * np.clip(b, 0, None) / tau)
    return np.where((a < 0) | (b < 0), 0.0, out)


def bridge_stays_above(spec: BridgeSpec, level: float) -> float:
    """``P(min_t B_t >= level)``: ``1 - exp(-2 (x - level)(y - level) / tau)`` or 0."""
    return float(stays_above_prob(spec.x, spec.y, level, spec.tau))


def bridge_interval_prob(spec: BridgeSpec, lo: float, hi: float) -> float:
    """``P(lo <= B_t <= hi for all t)`` by the alternating image series.

    The series is summed outward in the image index until both new terms
    fall below :data:`SERIES_CUTOFF`.
    """
    x, y, tau = spec.x, spec.y, spec.tau
    if not hi > lo:
        return 0.0
    if x < lo or x > hi or y < lo or y > hi:
        return 0.0
    w = hi - lo
    base = (y - x) ** 2

    def term(k):
        a = math.exp(-((y - x + 2 * k * w) ** 2 - base) / (2 * tau))
        b = math.exp(-((y + x - 2 * lo + 2 * k * w) ** 2 - base) / (2 * tau))
        return a - b

    total = term(0)
    k = 1
    while True:
        tp, tm = term(k), term(-k)
        total += tp + tm
        if k > 2 and abs(tp) < SERIES_CUTOFF and abs(tm) < SERIES_CUTOFF:
            break
        k += 1
        if k > 1_000_000:
            raise RuntimeError("image series failed to converge")
    return float(min(1.0, max(0.0, total)))


def bridge_band_prob(spec: BridgeSpec, a: float) -> float:
    """``P(|B_t| <= a for all t)``; zero when ``a <= 0`` or an endpoint lies outside."""
    if a <= 0:
        return 0.0
    if math.isinf(a):
        return 1.0
    return bridge_interval_prob(spec, -a, a)


def _band_prob_vec(x: np.ndarray, y: np.ndarray, lo, hi, tau: float) -> np.ndarray:
    """Vectorised strip probability for many bridges with common ``tau``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    lo = np.broadcast_to(np.asarray(lo, float), x.shape)
    hi = np.broadcast_to(np.asarray(hi, float), x.shape)
    w = hi - lo
    inside = (x >= lo) & (x <= hi) & (y >= lo) & (y <= hi) & (w > 0)
    out = np.zeros(x.shape)
    if not inside.any():
        return out
    xs, ys, los, ws = x[inside], y[inside], lo[inside], w[inside]
    kmax = int(np.ceil((math.sqrt(2 * tau * 30.0) + 2 * ws.min()) / (2 * ws.min()))) + 2
    if kmax > 100_000:
        raise RuntimeError("strip too narrow for the image series")
    k = np.arange(-kmax, kmax + 1)[:, None]
    base = (ys - xs) ** 2
    a = np.exp(-((ys - xs + 2 * k * ws) ** 2 - base) / (2 * tau))
    b = np.exp(-((ys + xs - 2 * los + 2 * k * ws) ** 2 - base) / (2 * tau))
    out[inside] = np.clip((a - b).sum(axis=0), 0.0, 1.0)
    return out


def discretize_bridge(spec: BridgeSpec, m: int, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """``n`` bridge paths sampled exactly at ``m`` equally spaced times, shape ``(n, m)``.

    The path is a Brownian motion pinned at the end, which gives the exact
    joint law of the bridge at the mesh.
    """
    if m < 2:
        raise ValueError("mesh needs at least the two endpoints")
    t = np.linspace(0.0, spec.length, m)
    dt = spec.length / (m - 1)
    inc = rng.standard_normal((n, m - 1)) * math.sqrt(spec.var * dt)
    W = np.concatenate([np.zeros((n, 1)), np.cumsum(inc, axis=1)], axis=1)
    s = t / spec.length
    path = spec.x + (spec.y - spec.x) * s + W - s * W[:, -1:]
    path[:, 0] = spec.x
    path[:, -1] = spec.y
    return path


def discrete_extreme_estimate(spec: BridgeSpec, m: int, rng: np.random.Generator, n: int,
                              upper: Optional[float] = None, lower: Optional[float] = None,
                              correction: bool = True, chunk: int = 20000) -> dict:
    """Monte Carlo frequency that discretised bridges leave ``[lower, upper]``.

    With ``correction`` the barriers are moved towards the path by
    ``BGK_SHIFT * sigma * sqrt(dt)``, which removes the leading
    discrete-monitoring bias.

    Returns
    -------
    dict
        ``p`` (frequency of exit), ``se`` and ``n``.
    """
    dt = spec.length / (m - 1)
    shift = BGK_SHIFT * math.sqrt(spec.var * dt) if correction else 0.0
    hits = 0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        path = discretize_bridge(spec, m, rng, k)
        out = np.zeros(k, dtype=bool)
        if upper is not None:
            out |= path.max(axis=1) >= upper - shift
        if lower is not None:
            out |= path.min(axis=1) <= lower + shift
        hits += int(out.sum())
        done += k
    p = hits / n
    return {"p": p, "se": math.sqrt(max(p * (1 - p), 1.0 / n) / n), "n": n}


# ---------------------------------------------------------------------------
# truncation levels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruncationConstants:
    """Constants of the truncation levels.

    Defaults are chosen so that the compatibility inequality between
    ``K(sqrt(2u))`` and ``K~(u)`` holds for every ``u`` in ``(0, 1/2]``.
    """

    C0: float = math.exp(12.0)
    c0: float = 6.0
    C1: float = 100.0
    c1: float = 1.0
    C1p: float = 0.5
    c1p: float = 1.0
    h0: float = 1.0

    def __post_init__(self):
        for name in ("C0", "c0", "C1", "c1", "C1p", "c1p", "h0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"constant {name} must be positive")


@dataclass(frozen=True)
class TruncationLevels:
    h: float
    u: float
    K: float
    K_tilde: float
    p: float
    constants: TruncationConstants
    compatible: bool

    @property
    def theta_band(self) -> float:
        """Band half-width ``K(h) - K~(u)`` for the Bernoulli edge marks."""
        return self.K - self.K_tilde

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in ("h", "u", "K", "K_tilde", "p", "compatible")}
        out["constants"] = self.constants.__dict__.copy()
        return out


def level_K(h: float, C0: float, c0: float) -> float:
    """``sqrt(log(C0 / h^c0))``."""
    if h <= 0:
        raise ValueError("h must be positive")
    arg = math.log(C0) - c0 * math.log(h)
    if arg <= 0:
        raise ValueError(f"C0 / h^c0 = {math.exp(arg):.4g} <= 1: the level K(h) is undefined")
    return math.sqrt(arg)


def truncation_levels(h: float, u: float, constants: Optional[TruncationConstants] = None) -> TruncationLevels:
    """Compute ``K(h)``, ``K~(u)``, ``p(u)`` and the compatibility flag.

    ``compatible`` records ``K(h) >= K~(u) + sqrt(-log((1 - p(u)) / 2) / 2)``,
    the condition under which the edge marks reach success probability
    ``p(u)``.

    Raises
    ------
    ValueError
        When a logarithm argument is not admissible or ``p(u)`` leaves ``(0, 1)``.
    """
    c = constants or TruncationConstants()
    if u <= 0:
        raise ValueError("u must be positive")
    K = level_K(h, c.C0, c.c0)
    Kt = level_K(u, c.C1, c.c1)
    q = c.C1p * u ** c.c1p
    if not 0 < q < 1:
        raise ValueError(f"p(u) = {1 - q:.4g} outside (0, 1)")
    need = Kt + math.sqrt(-0.5 * math.log(q / 2))
    return TruncationLevels(h, u, K, Kt, 1.0 - q, c, bool(K >= need))


# ---------------------------------------------------------------------------
# edge marks
# ---------------------------------------------------------------------------

@dataclass
class CableEdgeState:
    """Endpoint values of one cable edge and its sampled event marks."""

    edge: Optional[Edge]
    phi_x: float
    phi_y: float
    stays_above: bool
    within_band: bool
    theta: bool
    probabilities: dict = field(default_factory=dict)
    path: Optional[np.ndarray] = None

    def to_json(self) -> dict:
        return {"edge": None if self.edge is None else {"x": list(self.edge.x), "axis": self.edge.axis},
                "phi": [self.phi_x, self.phi_y], "stays_above": self.stays_above,
                "within_band": self.within_band, "theta": self.theta,
                "probabilities": self.probabilities}


def edge_marks(phi_x, phi_y, levels: TruncationLevels, rng: np.random.Generator, h: Optional[float] = None) -> dict:
    """Vectorised edge marks for many lattice edges.

    ``stays_above`` uses its own uniform. ``theta`` (bridge deviation from
    the linear interpolation within ``K - K~``) and ``within_band``
    (``|field| <= K`` on the whole edge) share one uniform, so
    ``theta <= within_band`` whenever both endpoints satisfy
    ``|phi| <= K~``, where the first event is contained in the second.
    """
    phi_x = np.asarray(phi_x, float)
    phi_y = np.asarray(phi_y, float)
    h = levels.h if h is None else h
    tau = EDGE_BRIDGE[0] * EDGE_BRIDGE[1]
    p_above = stays_above_prob(phi_x, phi_y, -h, tau)
    p_band = _band_prob_vec(phi_x, phi_y, -levels.K, levels.K, tau)
    a = levels.theta_band
    p_theta = bridge_band_prob(BridgeSpec(0.0, 0.0, *EDGE_BRIDGE), a) if a > 0 else 0.0
    u1 = rng.random(phi_x.shape)
    u2 = rng.random(phi_x.shape)
    return {
        "stays_above": u1 < p_above,
        "within_band": u2 < p_band,
        "theta": u2 < p_theta,
        "p_stays_above": p_above,
        "p_band": p_band,
        "p_theta": p_theta,
    }


def sample_edge_marks(phi_x: float, phi_y: float, levels: TruncationLevels, rng: np.random.Generator,
                      edge: Optional[Edge] = None, h: Optional[float] = None, mesh: Optional[int] = None) -> CableEdgeState:
    """Marks for a single edge, optionally with a discretised bridge path for inspection."""
    m = edge_marks(np.array([phi_x]), np.array([phi_y]), levels, rng, h)
    path = None
    if mesh is not None:
        path = discretize_bridge(BridgeSpec(phi_x, phi_y, *EDGE_BRIDGE), mesh, rng)[0]
    return CableEdgeState(edge, float(phi_x), float(phi_y), bool(m["stays_above"][0]),
                          bool(m["within_band"][0]), bool(m["theta"][0]),
                          {"stays_above": float(m["p_stays_above"][0]), "band": float(m["p_band"][0]),
                           "theta": float(m["p_theta"])}, path)


def midpoint_sample(phi_x, phi_y, rng: np.random.Generator, length: float = 0.5, var: float = 2.0) -> np.ndarray:
    """Field at the middle of edges given endpoint values: mean of the two, variance ``length var / 4``."""
    phi_x = np.asarray(phi_x, float)
    phi_y = np.asarray(phi_y, float)
    sd = math.sqrt(length * var / 4.0)
    return 0.5 * (phi_x + phi_y) + sd * rng.standard_normal(phi_x.shape)
