import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cablegff.experiments import (cascade_certification, decoupling_boxes, field_events, star_path_certification,
                                  star_path_oracle)
from cablegff.gff import VertexField
from cablegff.interlace import LocalTimes
from cablegff.lattice import edge_array, make_box
from cablegff.renorm import (FAMILIES, MonotoneEvent, bad_circuit_exists, build_scales, cascade_witness,
                             check_witness, classify_seeds, decoupling_test, eval_recursive, find_bad_star_path,
                             iid_recursion_exact, nominal_separation_ratio, random_bad_path,
                             renorm_decay_experiment)


def test_nominal_scales_three_dims():
    assert nominal_separation_ratio(3) == 1284
    s = build_scales(2, 3)
    assert (s.l, s.l0) == (1284, 5136)
    assert s.L[:2] == [2, 10272]


def test_surrogate_ladder():
    s = build_scales(4, 3, surrogate=(8, 2), n_max=3)
    assert s.L == [4 * 8 ** n for n in range(4)]
    assert s.surrogate and s.separation(1) == 16


def test_scale_overflow_and_bad_input():
    with pytest.raises(ValueError):
        build_scales(1, 3, n_max=6)
    with pytest.raises(ValueError):
        build_scales(0, 3)
    with pytest.raises(ValueError):
        build_scales(1, 3, surrogate=(1, 1))


def test_level_zero_is_identity():
    s = build_scales(2, 3, surrogate=(4, 2), n_max=1)
    pts = np.array([[0, 0, 0], [2, 4, 6]])
    lev = eval_recursive(pts, s, 0)
    assert lev[0].as_set() == {(0, 0, 0), (2, 4, 6)}


def test_off_lattice_seed_rejected():
    s = build_scales(2, 3, surrogate=(4, 2), n_max=1)
    with pytest.raises(ValueError):
        eval_recursive(np.array([[1, 0, 0]]), s, 1)


def test_two_distant_children_make_parent():
    s = build_scales(1, 3, surrogate=(8, 2), n_max=1)
    lev = eval_recursive(np.array([[0, 0, 0], [4, 0, 0]]), s, 1)
    assert lev[1].as_set() == {(0, 0, 0)}
    assert lev[1].witnesses[(0, 0, 0)] == ((0, 0, 0), (4, 0, 0))
    assert check_witness(lev, s)


def test_close_children_do_not():
    s = build_scales(1, 3, surrogate=(8, 2), n_max=1)
    lev = eval_recursive(np.array([[0, 0, 0], [3, 3, 3]]), s, 1)
    assert lev[1].as_set() == set()


def test_children_in_different_cells_do_not_pair():
    s = build_scales(1, 3, surrogate=(8, 2), n_max=1)
    lev = eval_recursive(np.array([[0, 0, 0], [12, 0, 0]]), s, 1)
    assert lev[1].as_set() == set()


def test_single_child_never_suffices():
    s = build_scales(1, 2, surrogate=(8, 2), n_max=2)
    lev = eval_recursive(np.array([[7, 7]]), s, 2)
    assert not lev[1].as_set() and not lev[2].as_set()


def test_tampered_witness_detected():
    s = build_scales(1, 3, surrogate=(8, 2), n_max=1)
    lev = eval_recursive(np.array([[0, 0, 0], [4, 0, 0]]), s, 1)
    lev[1].witnesses[(0, 0, 0)] = ((0, 0, 0), (1, 0, 0))
    assert not check_witness(lev, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_witnesses_always_check(seed):
    s = build_scales(1, 2, surrogate=(4, 2), n_max=3)
    g = np.random.default_rng(seed)
    pts = np.argwhere(g.random((64, 64)) < 0.2)
    lev = eval_recursive(pts, s, 3)
    assert check_witness(lev, s)
    for m in range(1, 4):
        assert np.all(lev[m].vertices % s.Ln(m) == 0)


def _brute_exact(q, l0, l, d):
    cells = np.array(list(itertools.product(range(l0), repeat=d)))
    n = len(cells)
    masks = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1  # (subsets, cells)
    k = masks.sum(axis=1)
    hit = np.zeros(masks.shape[0], bool)
    for a in range(d):
        big = np.where(masks == 1, cells[:, a], -1).max(axis=1)
        small = np.where(masks == 1, cells[:, a], l0).min(axis=1)
        hit |= (k >= 2) & (big - small >= l0 / l)
    return float(np.sum(np.where(hit, q ** k * (1 - q) ** (n - k), 0.0)))


@pytest.mark.parametrize("l0,l,d", [(3, 2, 2), (2, 2, 3), (4, 2, 2), (4, 1, 2), (2, 1, 2)])
def test_exact_recursion_against_enumeration(l0, l, d):
    s = build_scales(1, d, surrogate=(l0, l), n_max=2)
    for q in (0.02, 0.3, 0.7):
        ex = iid_recursion_exact(q, s, 2)
        assert ex[1] == pytest.approx(_brute_exact(q, l0, l, d), abs=1e-12)
        assert ex[2] == pytest.approx(_brute_exact(ex[1], l0, l, d), abs=1e-12)


def test_iid_recursion_monte_carlo():
    s = build_scales(1, 3, surrogate=(2, 2), n_max=2)
    r = renorm_decay_experiment(s, 2, 4000, seed=3, seed_kind="iid", q=0.3)
    assert all(abs(z) < 3 for z in r["z"])


def test_decay_unknown_kind():
    s = build_scales(1, 3, surrogate=(2, 2), n_max=1)
    with pytest.raises(ValueError):
        renorm_decay_experiment(s, 1, 2, seed_kind="poisson")
    with pytest.raises(ValueError):
        renorm_decay_experiment(s, 1, 2, seed_kind="gff")


def _ring(side, radius):
    c = side // 2
    ii, jj = np.indices((side, side))
    return np.maximum(np.abs(ii - c), np.abs(jj - c)) == radius, (c, c)


def test_ring_is_circuit_without_crossing():
    bad, c = _ring(9, 2)
    assert bad_circuit_exists(bad, 1, 4, c)
    assert find_bad_star_path(bad, 1, 4, c) is None


def test_broken_ring_is_not_circuit():
    bad, c = _ring(9, 2)
    bad[c[0], c[1] + 2] = False
    assert not bad_circuit_exists(bad, 1, 4, c)


def test_diagonal_star_path():
    bad = np.eye(9, dtype=bool)
    path = find_bad_star_path(bad, 0, 4, (4, 4))
    assert path is not None and len(path) == 5
    assert path[0] == (4, 4) and max(abs(path[-1][0] - 4), abs(path[-1][1] - 4)) == 4


def test_star_path_input_checks():
    bad = np.zeros((5, 5), bool)
    with pytest.raises(ValueError):
        find_bad_star_path(bad, 3, 2, (2, 2))
    with pytest.raises(ValueError):
        find_bad_star_path(bad, 0, 4, (2, 2))


def test_star_path_against_labelling_oracle():
    r = star_path_certification(200, seed=4)
    assert r["agree"] == 200 and r["paths_valid"] == r["paths_found"] and r["paths_found"] > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 0.8))
def test_circuit_iff_no_good_crossing(seed, p):
    g = np.random.default_rng(seed)
    side = 13
    bad = g.random((side, side)) < p
    ii, jj = np.indices(bad.shape)
    rad = np.maximum(np.abs(ii - 6), np.abs(jj - 6))
    good = ~bad & (rad >= 2) & (rad <= 6)
    lab, _ = ndimage.label(good)
    crossing = bool((set(lab[good & (rad == 2)]) & set(lab[good & (rad == 6)])) - {0})
    assert bad_circuit_exists(bad, 2, 6, (6, 6)) == (not crossing)
    assert star_path_oracle(bad, 1, 6, (6, 6)) == (find_bad_star_path(bad, 1, 6, (6, 6)) is not None)


def test_cascade_at_real_scales():
    r = cascade_certification(3, seed=5)
    assert r["feasible"] == 3
    assert r["ok"] == r["feasible"] and r["confirmed"] == r["ok"]


def test_cascade_refuses_at_small_ratio():
    s = build_scales(1, 3, surrogate=(8, 2), n_max=1)
    path = random_bad_path((0, 0, 0), s, 1, np.random.default_rng(6))
    r = cascade_witness(path, [{"C"}] * len(path), (0, 0, 0), s, 1)
    assert not r["ok"] and "fit" in r["reason"]


def test_cascade_input_checks():
    s = build_scales(1, 3, n_max=1)
    with pytest.raises(ValueError):
        cascade_witness(np.zeros((0, 3)), [], (0, 0, 0), s, 1)
    with pytest.raises(ValueError):
        cascade_witness(np.array([[0, 0, 0], [2, 0, 0]]), [{"C"}] * 2, (0, 0, 0), s, 1)
    with pytest.raises(ValueError):
        cascade_witness(np.array([[0, 0, 0], [1, 0, 0]]), [{"C"}] * 2, (0, 0, 0), s, 1)


def test_cascade_level_zero():
    s = build_scales(1, 3, n_max=1)
    path = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    r = cascade_witness(path, [{"D"}, {"E"}, {"F"}], (0, 0, 0), s, 0)
    assert r["ok"] and r["x0"] == (0, 0, 0) and r["family"] == "D"


def _seed_fixture(L0=2, shape=(2, 2, 2), u=1.0):
    s = build_scales(L0, 3, surrogate=(2, 2), n_max=1)
    box = make_box(3, [L0 * (n - 1) + 2 * L0 + 2 for n in shape], [-1] * 3)
    src, dst, _ = edge_array(box)
    ell = LocalTimes(box, np.full(box.shape, u), u)
    phi = VertexField(box, np.zeros(box.shape))
    theta = np.ones(src.size, bool)
    return s, box, ell, (src, dst), phi, theta


def test_seed_events_all_good():
    s, box, ell, tr, phi, theta = _seed_fixture()
    out = classify_seeds(ell, tr, phi, theta, 1.0, 1.0, s, (0, 0, 0), (2, 2, 2))
    for f in FAMILIES:
        assert out.events[f].all(), f
    assert out.good.all()


def test_seed_events_localised_failures():
    s, box, ell, tr, phi, theta = _seed_fixture()
    vals = phi.values.copy()
    vals[tuple(np.array([5, 5, 5]) - box.lo_array)] = 2.0  # only inside the far window
    vals[tuple(np.array([-1, -1, -1]) - box.lo_array)] = -2.0  # only inside the first window
    out = classify_seeds(ell, tr, VertexField(box, vals), theta, 1.0, 1.0, s, (0, 0, 0), (2, 2, 2))
    assert out.events["C"].sum() == 7 and not out.events["C"][1, 1, 1]
    assert out.events["Chat"].sum() == 7 and not out.events["Chat"][0, 0, 0]
    assert out.bad_sets()["C"].tolist() == [[2, 2, 2]]


def test_seed_events_mass_and_marks():
    s, box, ell, tr, phi, theta = _seed_fixture()
    theta = theta.copy()
    theta[0] = False  # edge at the box corner
    heavy = LocalTimes(box, np.full(box.shape, 2.0), 1.0)
    out = classify_seeds(heavy, tr, phi, theta, 1.0, 1.0, s, (0, 0, 0), (2, 2, 2))
    assert not out.events["F"].any() and out.events["E"].all()
    assert not out.events["D"][0, 0, 0] and out.events["D"].sum() == 7


def test_seed_event_needs_traversal():
    s, box, ell, tr, phi, theta = _seed_fixture()
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64))
    out = classify_seeds(ell, empty, phi, theta, 1.0, 1.0, s, (0, 0, 0), (2, 2, 2))
    assert not out.events["E"].any()


def test_seed_window_too_small():
    s, box, ell, tr, phi, theta = _seed_fixture()
    with pytest.raises(ValueError):
        classify_seeds(ell, tr, phi, theta, 1.0, 1.0, s, (0, 0, 0), (3, 2, 2))


def test_decoupling_field_events_hold():
    boxes = decoupling_boxes(3, 3, 4)
    r = decoupling_test("gff", field_events(), boxes, 0.25, 400, seed=7)
    assert r["separation"] == 4 and r["all_hold"] and len(r["rows"]) == 4


def test_decoupling_input_checks():
    A1, A2 = decoupling_boxes(3, 3, 4)
    inc = MonotoneEvent("up", lambda v: v.mean() > 0, True)
    dec = MonotoneEvent("down", lambda v: v.mean() < 0, False)
    with pytest.raises(ValueError):
        decoupling_test("gff", [(inc, inc)], (A1, A1), 0.1, 10)
    with pytest.raises(ValueError):
        decoupling_test("gff", [(inc, dec)], (A1, A2), 0.1, 10)
    with pytest.raises(ValueError):
        wrong = MonotoneEvent("mislabelled", lambda v: v.mean() > 0, False)
        decoupling_test("gff", [(wrong, wrong)], (A1, A2), 2.0, 10)
    with pytest.raises(ValueError):
        decoupling_test("interlacement", [(inc, inc)], (A1, A2), 0.1, 10)
    with pytest.raises(ValueError):
        decoupling_test("percolation", [(inc, inc)], (A1, A2), 0.1, 10)
