import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cablegff.cable import (BGK_SHIFT, BridgeSpec, TruncationConstants, _band_prob_vec, bridge_band_prob,
                            bridge_interval_prob, bridge_stays_above, bridge_sup_tail, discrete_extreme_estimate,
                            discretize_bridge, edge_marks, level_K, midpoint_sample, sample_edge_marks,
                            stays_above_prob, truncation_levels)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_sup_tail_value():
    assert bridge_sup_tail(BridgeSpec(0, 0, 0.5, 2), 1.0) == pytest.approx(math.exp(-2))
    assert bridge_sup_tail(BridgeSpec(0, 0, 0.5, 2), 1.0) == pytest.approx(0.135335, abs=1e-6)


def test_sup_tail_at_endpoint_level():
    assert bridge_sup_tail(BridgeSpec(0.3, -0.2), 0.3) == 1.0


def test_sup_tail_below_endpoint_rejected():
    with pytest.raises(ValueError):
        bridge_sup_tail(BridgeSpec(0.5, 0.0), 0.2)


@pytest.mark.parametrize("h,px,py", [(0.1, 0.0, 0.0), (0.3, 0.5, -0.1), (0.05, 1.2, 0.7)])
def test_quarter_edge_stay_above(h, px, py):
    p = bridge_stays_above(BridgeSpec(px, py, 0.25, 2.0), -h)
    assert p == pytest.approx(1 - math.exp(-4 * (h + px) * (h + py)))


@pytest.mark.parametrize("h", [0.02, 0.1, 0.5])
def test_stays_above_zero_endpoints(h):
    assert bridge_stays_above(BridgeSpec(0, 0), -h) == pytest.approx(1 - math.exp(-2 * h * h))


def test_stays_above_limits():
    assert bridge_stays_above(BridgeSpec(0, 0), -50) == pytest.approx(1.0)
    assert bridge_stays_above(BridgeSpec(-0.2, 0.4), -0.2) == 0.0
    assert bridge_stays_above(BridgeSpec(-0.5, 0.4), -0.2) == 0.0
    assert np.all(stays_above_prob(np.array([-1.0, 0.0]), np.array([1.0, -2.0]), -0.5) == 0)


def test_band_limits():
    assert bridge_band_prob(BridgeSpec(0, 0), math.inf) == 1.0
    assert bridge_band_prob(BridgeSpec(0, 0), 0.0) == 0.0
    assert bridge_band_prob(BridgeSpec(0, 0), -1.0) == 0.0
    assert bridge_band_prob(BridgeSpec(0, 0), 30.0) == pytest.approx(1.0)
    assert bridge_band_prob(BridgeSpec(1.5, 0), 1.0) == 0.0


@pytest.mark.parametrize("a", [0.5, 1.0, 1.5, 2.5])
def test_band_union_bound(a):
    spec = BridgeSpec(0, 0)
    p = bridge_band_prob(spec, a)
    assert p >= 1 - 2 * bridge_sup_tail(spec, a) - 1e-15
    assert p <= 1 - bridge_sup_tail(spec, a) + 1e-15


def test_one_sided_limit_of_strip():
    spec = BridgeSpec(0.2, -0.1)
    assert bridge_interval_prob(spec, -40, 0.7) == pytest.approx(1 - bridge_sup_tail(spec, 0.7), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 3), st.floats(0.05, 3))
def test_vectorised_and_scalar_strip_agree(x, y, lo_gap, hi_gap):
    lo, hi = min(x, y) - lo_gap, max(x, y) + hi_gap
    scalar = bridge_interval_prob(BridgeSpec(x, y), lo, hi)
    vec = _band_prob_vec(np.array([x]), np.array([y]), lo, hi, 1.0)[0]
    assert vec == pytest.approx(scalar, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.05, 4), st.floats(0.1, 10), st.floats(0.01, 2))
def test_length_variance_invariance(x, y, length, var, gap):
    alpha = 0.37
    a, b = BridgeSpec(x, y, length, var), BridgeSpec(x, y, alpha * length, var / alpha)
    M = max(x, y) + gap
    assert bridge_sup_tail(a, M) == pytest.approx(bridge_sup_tail(b, M), rel=1e-12)
    assert bridge_stays_above(a, min(x, y) - gap) == pytest.approx(bridge_stays_above(b, min(x, y) - gap), rel=1e-12)
    band = max(abs(x), abs(y)) + gap
    assert bridge_band_prob(a, band) == pytest.approx(bridge_band_prob(b, band), abs=1e-12)


def test_invalid_bridge_rejected():
    with pytest.raises(ValueError):
        BridgeSpec(0, 0, 0.0, 2.0)


def test_discretize_two_points_is_endpoints():
    p = discretize_bridge(BridgeSpec(0.3, -0.7), 2, rng(), 5)
    assert np.all(p[:, 0] == 0.3) and np.all(p[:, 1] == -0.7)


def test_discretize_pins_endpoints():
    p = discretize_bridge(BridgeSpec(1.0, 2.0), 17, rng(1), 10)
    assert np.all(p[:, 0] == 1.0) and np.all(p[:, -1] == 2.0)


def test_midpoint_variance_quarter():
    p = discretize_bridge(BridgeSpec(0, 0, 0.5, 2), 3, rng(2), 200_000)[:, 1]
    se = p.var() * math.sqrt(2 / p.size)
    assert abs(p.var() - 0.25) < 3 * se
    m = midpoint_sample(np.zeros(200_000), np.zeros(200_000), rng(3))
    assert abs(m.var() - 0.25) < 3 * se


def test_discretize_marginal_variance_at_quarter_time():
    # variance s (l - s) sigma^2 / l at s = l/4
    p = discretize_bridge(BridgeSpec(0, 0, 0.5, 2), 5, rng(4), 200_000)[:, 1]
    target = 2 * 0.125 * 0.375 / 0.5
    assert abs(p.var() - target) < 3 * p.var() * math.sqrt(2 / p.size)


def test_sup_tail_monte_carlo_with_continuity_correction():
    spec = BridgeSpec(0, 0)
    r = discrete_extreme_estimate(spec, 512, rng(5), 40_000, upper=1.0)
    assert abs(r["p"] - math.exp(-2)) < 3 * r["se"] + 2 / 512


def test_continuity_correction_constant():
    from scipy.special import zeta
    assert BGK_SHIFT == pytest.approx(-zeta(0.5) / math.sqrt(2 * math.pi), rel=1e-12)


def test_level_K_value():
    assert level_K(0.1, 100, 2) == pytest.approx(3.0349, abs=1e-4)
    assert level_K(0.1, 100, 2) == pytest.approx(math.sqrt(math.log(1e4)))


def test_level_K_rejects_small_argument():
    with pytest.raises(ValueError):
        level_K(1.0, 1.0, 2)
    with pytest.raises(ValueError):
        level_K(2.0, 1.0, 2)


def test_h_times_K_decreasing():
    hs = [1e-2, 1e-4, 1e-6]
    vals = [h * level_K(h, 100, 2) for h in hs]
    assert vals[0] > vals[1] > vals[2]


def test_p_of_u():
    c = TruncationConstants(C0=100, c0=2, C1=100, c1=1, C1p=0.5, c1p=1)
    assert truncation_levels(0.1, 0.1, c).p == pytest.approx(0.95)


def test_default_constants_compatible():
    for u in (0.01, 0.1, 0.25, 0.5):
        h = math.sqrt(2 * u)
        assert truncation_levels(h, u).compatible


def test_truncation_rejects_bad_u():
    with pytest.raises(ValueError):
        truncation_levels(0.1, 0.0)
    with pytest.raises(ValueError):
        truncation_levels(0.1, 3.0)
    with pytest.raises(ValueError):
        TruncationConstants(C0=-1)


def test_edge_mark_stays_above_frequency():
    lv = truncation_levels(0.3, 0.1)
    n = 200_000
    m = edge_marks(np.zeros(n), np.zeros(n), lv, rng(6))
    p = 1 - math.exp(-2 * 0.3 ** 2)
    assert m["p_stays_above"][0] == pytest.approx(p)
    assert abs(m["stays_above"].mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_edge_mark_below_level_never_stays_above():
    lv = truncation_levels(0.2, 0.1)
    m = edge_marks(np.full(1000, -0.3), np.linspace(-1, 2, 1000), lv, rng(7))
    assert not m["stays_above"].any()


def test_theta_implies_band_when_endpoints_small():
    lv = truncation_levels(0.05, 0.1)
    g = rng(8)
    phi = g.uniform(-lv.K_tilde, lv.K_tilde, size=(2, 100_000))
    m = edge_marks(phi[0], phi[1], lv, g)
    assert np.all(~m["theta"] | m["within_band"])
    assert m["p_theta"] <= m["p_band"].min() + 1e-12


def test_theta_frequency_above_union_bound():
    lv = truncation_levels(0.05, 0.1)
    m = edge_marks(np.zeros(50_000), np.zeros(50_000), lv, rng(9))
    bound = 1 - 2 * math.exp(-2 * lv.theta_band ** 2)
    se = math.sqrt(bound * (1 - bound) / 50_000)
    assert m["theta"].mean() >= bound - 3 * se
    assert bound >= lv.p


def test_marks_independent_across_edges():
    lv = truncation_levels(0.4, 0.1)
    n = 100_000
    m = edge_marks(np.full((n, 2), 0.2), np.full((n, 2), 0.1), lv, rng(10))
    a, b = m["stays_above"][:, 0].astype(float), m["stays_above"][:, 1].astype(float)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 3 / math.sqrt(n)


def test_single_edge_state_with_path():
    lv = truncation_levels(0.2, 0.1)
    s = sample_edge_marks(0.4, -0.1, lv, rng(11), mesh=9)
    assert s.path[0] == 0.4 and s.path[-1] == -0.1
    js = s.to_json()
    assert set(js) >= {"phi", "stays_above", "within_band", "theta", "probabilities"}
