import math

import numpy as np
import pytest
from scipy import stats

from cablegff.greens import equilibrium, green_table
from cablegff.interlace import (LaplaceNormError, connectivity_experiment, edge_trace, halo_box,
                                key_equilibrium, laplace_exact, large_deviation_experiment, local_time_field,
                                occupied_set, poisson_fit_pvalue, psi_growth, sample_interlacement, walk_trace,
                                wilson_interval)
from cablegff.lattice import Box, make_box
from cablegff.streams import stream

G0 = 1.516386059151978 / 6


def rngs(tag, seed=0):
    return lambda *k: stream(seed, tag, *k)


def test_laplace_single_point():
    val = laplace_exact(np.array([[0, 0, 0]]), np.array([1.0]), 1.0)
    assert val == pytest.approx(3.81220, abs=1e-5)
    assert val == pytest.approx(math.exp(1 / (1 - G0)), abs=1e-8)


def test_laplace_zero_potential():
    assert laplace_exact(np.array([[0, 0, 0], [1, 0, 0]]), np.zeros(2), 2.0) == 1.0


def test_laplace_norm_boundary_rejected():
    with pytest.raises(LaplaceNormError):
        laplace_exact(np.array([[0, 0, 0]]), np.array([1 / green_table(3).value(np.zeros(3, int))]), 1.0)
    with pytest.raises(LaplaceNormError):
        laplace_exact(np.array([[0, 0, 0]]), np.array([-1.2 / G0]), 1.0)


def test_laplace_two_points_series():
    # geometric series sum_n (G V)^n 1 truncated far out
    pts = np.array([[0, 0, 0], [1, 1, 0]])
    V = np.array([0.5, -0.8])
    G = green_table(3).matrix(pts)
    acc, term = np.zeros(2), np.ones(2)
    for _ in range(200):
        acc += term
        term = G @ (V * term)
    assert laplace_exact(pts, V, 0.7) == pytest.approx(math.exp(0.7 * V @ acc), rel=1e-12)


def test_halo_factor_minimum():
    with pytest.raises(ValueError):
        halo_box(make_box(3, [4, 4, 4]), 1.5)


def test_nonpositive_level_rejected():
    with pytest.raises(ValueError):
        sample_interlacement(make_box(3, [3, 3, 3]), 0.0, np.random.default_rng())


def test_trajectory_count_mean_is_capacity():
    win = make_box(3, [8, 8, 8])
    cap = key_equilibrium(win.dilate(1)).capacity
    counts = np.array([sample_interlacement(win, 1.0, stream(1, "count", k)).count for k in range(400)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - cap) < 3 * se
    assert poisson_fit_pvalue(counts, cap) > 0.01


def test_small_level_mostly_empty():
    win = make_box(3, [2, 2, 2])
    cap = key_equilibrium(win.dilate(1)).capacity
    u = 0.01
    empty = sum(sample_interlacement(win, u, stream(2, "empty", k)).count == 0 for k in range(2000))
    p = math.exp(-u * cap)
    assert abs(empty / 2000 - p) < 3 * math.sqrt(p * (1 - p) / 2000)


def test_label_thinning_reproduces_lower_level():
    win = make_box(3, [4, 4, 4])
    cap = key_equilibrium(win.dilate(1)).capacity
    thinned = []
    for k in range(1000):
        s = sample_interlacement(win, 1.0, stream(3, "thin", k))
        thinned.append(int(s.mask(0.4).sum()))
        assert np.all(np.diff(s.labels) >= 0) and np.all((s.labels >= 0) & (s.labels <= 1.0))
    assert poisson_fit_pvalue(np.array(thinned), 0.4 * cap) > 0.01


def test_level_above_sample_rejected():
    s = sample_interlacement(make_box(3, [3, 3, 3]), 0.5, stream(4, "lvl"))
    with pytest.raises(ValueError):
        s.mask(0.6)


def test_local_times_monotone_in_level():
    s = sample_interlacement(make_box(3, [6, 6, 6]), 1.0, stream(5, "mono"))
    prev = np.zeros((6, 6, 6))
    for lvl in (0.1, 0.3, 0.6, 1.0):
        ell = local_time_field(s, lvl).values
        assert np.all(ell >= prev)
        prev = ell


def test_empty_sample_zero_local_time():
    win = make_box(3, [3, 3, 3])
    for k in range(200):
        s = sample_interlacement(win, 1e-4, stream(6, "e", k))
        if s.count == 0:
            assert np.all(local_time_field(s).values == 0)
            return
    pytest.fail("no empty sample drawn")


def test_occupied_set_equals_visited():
    for k in range(5):
        s = sample_interlacement(make_box(3, [6, 6, 6]), 0.5, stream(7, "occ", k))
        vis, src, dst = edge_trace(s)
        assert np.array_equal(occupied_set(local_time_field(s)), vis)
        ends = np.zeros(vis.size, bool)
        ends[src] = True
        ends[dst] = True
        assert np.all(vis.ravel()[ends])


def test_trajectories_are_nearest_neighbour_paths():
    s = sample_interlacement(make_box(3, [4, 4, 4]), 0.5, stream(8, "path"))
    for seg in range(min(s.segment_count, 20)):
        pos = s.positions(seg)
        assert np.all(np.abs(np.diff(pos, axis=0)).sum(axis=1) == 1)
        assert np.all(s.halo.dilate(1).contains(pos))


def test_local_times_outside_key_rejected():
    s = sample_interlacement(make_box(3, [3, 3, 3]), 0.5, stream(9, "key"))
    with pytest.raises(ValueError):
        local_time_field(s, box=make_box(3, [8, 8, 8], lo=[-3, -3, -3]))


def test_mean_local_time_deep_vertex():
    win = make_box(3, [6, 6, 6])
    vals = np.array([local_time_field(sample_interlacement(win, 0.5, stream(10, "mean", k))).at([3, 3, 3])
                     for k in range(3000)])
    assert abs(vals.mean() - 0.5) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_occupation_probability():
    win = make_box(3, [5, 5, 5])
    u = 0.3
    occ = np.array([local_time_field(sample_interlacement(win, u, stream(11, "occ", k))).at([2, 2, 2]) > 0
                    for k in range(3000)])
    p = 1 - math.exp(-u / G0)
    assert abs(occ.mean() - p) < 3 * math.sqrt(p * (1 - p) / occ.size)


def test_superposition_of_levels():
    win = make_box(3, [4, 4, 4])
    merged, direct = [], []
    for k in range(1500):
        a = local_time_field(sample_interlacement(win, 0.3, stream(12, "a", k))).at([2, 2, 2])
        b = local_time_field(sample_interlacement(win, 0.5, stream(12, "b", k))).at([2, 2, 2])
        merged.append(a + b)
        direct.append(local_time_field(sample_interlacement(win, 0.8, stream(12, "c", k))).at([2, 2, 2]))
    assert stats.ks_2samp(merged, direct).pvalue > 0.01


def test_walk_trace_shape_and_steps():
    w = walk_trace([0, 0, 0], 50, np.random.default_rng(0), 4)
    assert w.shape == (4, 51, 3)
    assert np.all(np.abs(np.diff(w, axis=1)).sum(axis=2) == 1)


def test_wilson_interval_contains_point():
    lo, hi = wilson_interval(3, 40)
    assert lo < 3 / 40 < hi
    lo, hi = wilson_interval(0, 40)
    assert lo <= 1e-12 and hi > 0


def test_connectivity_failure_nested():
    res = connectivity_experiment(0.2, 6, [0.1, 0.3, 0.5], 60, rngs("conn-nest"))
    rates = [r["failures"] for r in res["rows"]]
    assert rates[0] >= rates[1] >= rates[2]


def test_single_trajectory_trace_connected():
    from cablegff.interlace import _components
    found = 0
    for k in range(400):
        s = sample_interlacement(make_box(3, [4, 4, 4]), 0.05, stream(16, "one", k))
        # a trajectory that leaves the halo and comes back is stored as
        # several segments; the part outside the halo is not simulated
        if s.count != 1 or s.segment_count != 1:
            continue
        region = s.halo.dilate(1)
        vis, src, dst = edge_trace(s, region)
        lab = _components(region.size, src, dst)
        assert np.unique(lab[vis.ravel()]).size == 1
        found += 1
    assert found > 10


def test_connectivity_high_level_rarely_fails():
    res = connectivity_experiment(2.0, 10, [0.1], 400, rngs("conn-high"))
    assert res["rows"][0]["ci_hi"] < 0.01


def test_large_deviation_decreasing():
    res = large_deviation_experiment(1.0, [4, 8, 12], 0.25, 300, rngs("ld"))
    assert res["decreasing"]
    for r in res["rows"]:
        assert abs(r["mean"] - 1.0) < 3 * r["se_mean"]


def test_large_deviation_far_tail():
    res = large_deviation_experiment(1.0, [4], 10.0, 200, rngs("ld-far"))
    assert res["rows"][0]["p"] == 0


def test_psi_growth_small_level_single_trace():
    rng = np.random.default_rng(13)
    it = psi_growth(1e-6, [0, 0, 0], 64, 2, rng)
    assert it[0]["size"] == it[1]["size"]
    assert it[0]["cap"] == pytest.approx(it[1]["cap"])


def test_psi_growth_confinement_and_capacity():
    rng = np.random.default_rng(14)
    T = 256
    bound = T ** ((1 + 1 / 3) / 2)
    caps, ok = [], 0
    for _ in range(100):
        r = psi_growth(0.25, [0, 0, 0], T, 1, rng)[0]
        caps.append(r["cap"])
        ok += r["extent"] <= bound
    assert ok >= 99
    walk = np.unique(walk_trace([0, 0, 0], T, np.random.default_rng(15))[0], axis=0)
    assert equilibrium(walk).capacity <= walk.shape[0] / G0 + 1e-9


def test_psi_growth_requires_iterate():
    with pytest.raises(ValueError):
        psi_growth(0.1, [0, 0, 0], 10, 0, np.random.default_rng())
