import math

import numpy as np
import pytest

from rdslab.cocycle import NEVER, split_trajectories, tempered_constant
from rdslab.pairs import (GoodTimeParams, PushParams, StandardPair, arc_pair, backwards_good_time,
                          curvatures, density_holder_bound, goodness, holder_constant, push_family,
                          push_pair, push_step, recovered_goodness, recovery_experiment, restrict,
                          segment_pair, subdivide, volume_family)
from rdslab.rds_core import (ValidationError, angle_dist, inv_sl2, make_tuple, norm2, orbit,
                             tuple_from_matrices, word_stream)


# goodness

def test_unit_segment_is_perfectly_good():
    g = goodness(segment_pair([0.0, 0.0], [1.0, 0.0], 1e-3))
    assert g.R == 0.0


def test_half_segment_binds_on_length():
    g = goodness(segment_pair([0.0, 0.0], [0.5, 0.0], 1e-3))
    assert abs(g.R - math.log(2)) < 1e-12
    assert g.binding == "length"


def test_circle_curvature_estimate():
    pair = arc_pair([0.5, 0.5], 0.1, 0.0, 2.0, 1e-3)
    k = curvatures(pair.nodes)
    assert np.all(np.abs(k - 10.0) <= 0.1)
    g = goodness(pair)
    assert g.binding == "curvature" and abs(g.R - math.log(10)) < 0.01


def test_holder_of_sqrt():
    s = np.linspace(0.0, 1.0, 401)
    assert abs(holder_constant(s, np.sqrt(s), 0.5) - 1.0) < 1e-12


def test_pair_needs_two_nodes():
    with pytest.raises(ValidationError):
        StandardPair(np.zeros((1, 2)), np.zeros(1))


# pushforward

def test_push_conserves_mass():
    tup = make_tuple("cat_pair_shear")
    pair = segment_pair([0.1, 0.2], [0.3, 0.25], 2e-3, logrho=lambda s: np.sin(10 * s))
    fam = push_pair(tup, word_stream(0, 0, 2), 4, pair)
    assert abs(fam.total_mass - pair.mass) < 1e-10
    for p in fam.pairs:
        assert np.max(p.seg) <= 2e-3 * (1 + 1e-12)


def test_linear_push_of_straight_pair():
    A = np.array([[2.0, 1.0], [1.0, 1.0]])
    tup = tuple_from_matrices([A])
    pair = segment_pair([0.1, 0.1], [0.2, 0.1], 1e-3)
    (img,) = push_step(tup.maps[0], pair)
    d = img.nodes - img.nodes[0]
    e = A @ np.array([1.0, 0.0])
    assert np.max(np.abs(d[:, 0] * e[1] - d[:, 1] * e[0])) < 1e-12
    assert np.max(np.abs(img.logrho + math.log(np.hypot(*e)))) < 1e-12


def test_density_holder_bound_on_random_cases():
    tup = make_tuple("cat_pair_shear")
    rng = np.random.default_rng(0)
    for _ in range(100):
        p0 = rng.random(2)
        th = rng.uniform(0, math.pi)
        L = rng.uniform(0.05, 0.3)
        a = rng.uniform(-2, 2)
        pair = segment_pair(p0, p0 + L * np.array([math.cos(th), math.sin(th)]), 2e-3,
                            logrho=lambda s: a * np.sqrt(s) + 0.3 * np.sin(20 * s))
        f = tup.maps[rng.integers(2)]
        old = holder_constant(pair.s, pair.logrho, 0.5)
        new = max(holder_constant(p.s, p.logrho, 0.5) for p in push_step(f, pair))
        mDf = float(np.min(1.0 / norm2(inv_sl2(f.jac(np.mod(pair.nodes, 1.0))))))
        curv = float(np.max(curvatures(pair.nodes)))
        # C = 1 calibrated; every case also passes with C = 0
        assert new <= density_holder_bound(tup.c2_bound, mDf, old, curv, C=1.0)


def test_goodness_decays_at_most_linearly():
    tup = make_tuple("cat_pair_shear")
    rng = np.random.default_rng(1)
    C, eta = 1.5, 0.5  # calibrated: worst excess 0.88 at n = 1
    for w in range(10):
        pair = arc_pair(rng.random(2), 0.3, 0.0, 0.4, 2e-3)
        pair = StandardPair(pair.nodes, 0.5 * np.sin(8 * pair.s))
        R0 = goodness(pair).R
        for n in (1, 2, 3, 4):
            fam = push_pair(tup, word_stream(7, w, 2), n, pair)
            assert max(g.R for g in fam.goodness()) <= C + R0 + n * eta


def test_forward_smoothing_envelope():
    tup = make_tuple("cat_pair_shear")
    rng = np.random.default_rng(1)
    rng.random((10, 2))  # keep the draws used for calibration
    lam, eps, D1 = 0.3, 0.05, 2.0  # calibrated: worst excess 1.09
    for w in range(6):
        x = rng.random(2)
        th = rng.uniform(0, math.pi)
        e = np.array([math.cos(th), math.sin(th)])
        pair = segment_pair(x - 0.005 * e, x + 0.005 * e, 2e-4)
        syms = word_stream(9, w, 2).symbols(8)
        _, jacs = orbit(tup, syms, x[None])
        v, inc = e.copy(), []
        for J in jacs[:, 0]:
            v = J @ v
            r = float(np.hypot(*v))
            inc.append(math.log(r))
            v /= r
        for n in (2, 4, 8):
            C = max(0.0, -tempered_constant(inc[:n], lam, eps))
            fam = push_pair(tup, syms, n, pair, PushParams(mesh=2e-3))
            R = max(g.R for g in fam.goodness())
            assert R <= 18 * eps * n + 18 * C + D1


# volume family

def test_volume_family_mass_and_aliasing():
    N = 8
    fam = volume_family(N)
    assert fam.total_mass == 1.0
    K = fam.pairs[0].K
    for p in range(1, K - 1):
        val = fam.integrate(lambda P: np.exp(2j * np.pi * (p * P[:, 0] + 3 * P[:, 1])))
        assert abs(val) < 1e-12
    for q in range(1, N):
        val = fam.integrate(lambda P: np.exp(2j * np.pi * (q * P[:, 1] + 5 * P[:, 0])))
        assert abs(val) < 1e-12
    with pytest.raises(ValidationError):
        volume_family(0)


def test_volume_family_push_keeps_mass():
    tup = make_tuple("cat_pair_shear")
    fam = push_family(tup, word_stream(0, 0, 2), 2, volume_family(4))
    assert abs(fam.total_mass - 1.0) < 1e-10


# subdivision

def test_fractions_split_mass():
    pair = segment_pair([0, 0], [0.3, 0.1], 1e-3, logrho=lambda s: s)
    fam = subdivide(pair, fractions=[0.3, 0.7])
    assert np.allclose(fam.masses, [0.3 * pair.mass, 0.7 * pair.mass], rtol=1e-15, atol=0)
    with pytest.raises(ValidationError):
        subdivide(pair, fractions=[0.3, 0.6])
    with pytest.raises(ValidationError):
        subdivide(pair, cuts=[pair.length])


def test_midpoint_cut():
    pair = segment_pair([0, 0], [0.4, 0.0], 1e-3)
    a, b = subdivide(pair, cuts=[0.2]).masses
    assert abs(a - b) < 1e-15 and abs(a + b - pair.mass) < 1e-15


def test_nested_subdivision():
    pair = arc_pair([0.5, 0.5], 0.2, 0.0, 1.5, 1e-3)
    pair = StandardPair(pair.nodes, np.cos(3 * pair.s))
    first = subdivide(pair, cuts=[0.1, 0.17])
    nested = sum(subdivide(p, cuts=[p.length / 3]).total_mass for p in first.pairs)
    assert abs(nested - pair.mass) < 1e-12
    assert abs(first.total_mass - pair.mass) < 1e-12


def test_restrict_length():
    pair = segment_pair([0, 0], [0.4, 0.0], 1e-3)
    assert abs(restrict(pair, 0.1, 0.25).length - 0.15) < 1e-12


# backwards good times

GP = GoodTimeParams(C=2.0, lam=0.5, eps=0.05, A=2.0, eps_prime=0.1, R=0.0)


def test_cat_pair_horizontal_is_finite():
    tup = make_tuple("cat_pair")
    w = word_stream(4, 0, 2)
    x = np.array([0.3, 0.4])
    T = backwards_good_time(tup, w, x, 0.0, GP, horizon=60)
    assert GP.n_min <= T < NEVER
    _, jacs = orbit(tup, w.symbols(T), x)
    tr = split_trajectories(jacs)
    assert angle_dist(float(tr.theta_s), 0.0) >= math.exp(-GP.eps_prime * (T - GP.n_min))


def test_tangent_along_stable_direction_fails_first():
    tup = make_tuple("cat_pair")
    w = word_stream(4, 0, 2)
    x = np.array([0.3, 0.4])
    _, jacs = orbit(tup, w.symbols(GP.n_min), x)
    ts = float(split_trajectories(jacs).theta_s)
    T = backwards_good_time(tup, w, x, ts, GP, horizon=60)
    assert T > GP.n_min


def test_recovery_tail_and_goodness():
    tup = make_tuple("cat_pair_shear")
    pair = segment_pair([0.3, 0.4], [0.3 + 0.2 * math.cos(2.124), 0.4 + 0.2 * math.sin(2.124)], 2e-3)
    res = recovery_experiment(tup, pair, 1000, GP, horizon=60, with_goodness=20)
    assert np.all(res.T >= GP.n_min)
    assert res.tail_fit.slope < 0 and res.tail_fit.r2 >= 0.8
    R = res.R_at_T[~np.isnan(res.R_at_T)]
    assert len(R) >= 15 and np.all(R <= 1.5)


def test_recovered_goodness_of_linear_image():
    tup = make_tuple("cat_pair")
    pair = segment_pair([0.3, 0.4], [0.5, 0.4], 1e-3)
    R = recovered_goodness(tup, word_stream(4, 0, 2), pair, 0.1, 8)
    assert abs(R - math.log(4)) < 1e-3
