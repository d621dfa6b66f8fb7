import math

import numpy as np
import pytest

from rdslab.cocycle import (NEVER, azuma_bound, bootstrap_tv_null, cushion, cushion_series,
                            histogram_tv, scan_min_batch, singular_split, splitting_certificate,
                            stable_direction_distribution, subtempered_norm_constant,
                            tempered_constant, tempered_stopping)
from rdslab.fitting import loglinear_fit
from rdslab.rds_core import (ValidationError, compose_word, make_tuple, norm2, orbit_words,
                             running_products, word_stream)

from oracles import (brute_cushion, brute_subtempered, brute_tempered, brute_tempered_plain,
                     product_lognorms, random_sl2, svd_dirs)

CAT = np.array([[2.0, 1.0], [1.0, 1.0]])


def _diag_cocycle(lam, n):
    return np.array([np.diag([math.exp(lam), math.exp(-lam)])] * n)


# tempered constants

def test_constant_sequence_is_zero():
    C, (j, k) = tempered_constant(np.full(10, 0.7), 0.7, 0.1, return_argmin=True)
    assert C == 0.0
    assert (j, k) == (0, 1)


def test_zero_sequence():
    assert tempered_constant(np.zeros(10), 1.0, 0.0) == -10.0


def test_scan_matches_quadratic_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        xs = rng.normal(0.5, 1.0, size=200)
        lam, eps = rng.uniform(0.1, 1.0), rng.uniform(0.0, 0.2)
        assert tempered_constant(xs, lam, eps) == brute_tempered(xs, lam, eps)
        assert abs(tempered_constant(xs, lam, eps) - brute_tempered_plain(xs, lam, eps)) < 1e-9


def test_reverse_direction():
    xs = np.random.default_rng(1).normal(size=40)
    assert tempered_constant(xs, 0.3, 0.1, "reverse") == tempered_constant(xs[::-1], 0.3, 0.1)
    with pytest.raises(ValidationError):
        tempered_constant(xs, 0.3, 0.1, "sideways")


def test_empty_sequence_rejected():
    with pytest.raises(ValidationError):
        tempered_constant([], 1.0, 0.0)


def test_monotone_in_lambda_and_eps():
    rng = np.random.default_rng(2)
    for _ in range(100):
        xs = rng.normal(0.4, 1.0, size=60)
        assert tempered_constant(xs, 0.5, 0.1) >= tempered_constant(xs, 0.6, 0.1)
        assert tempered_constant(xs, 0.5, 0.1) <= tempered_constant(xs, 0.5, 0.2)


def test_batch_scan_agrees():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(30, 7))
    P = np.vstack([np.zeros((1, 7)), np.cumsum(xs, axis=0)])
    got = scan_min_batch(P, 0.4, 0.05)
    for b in range(7):
        assert got[b] == tempered_constant(xs[:, b], 0.4, 0.05)


# matrix versions

def test_subtempered_diagonal_and_rotation():
    assert abs(subtempered_norm_constant(_diag_cocycle(1.0, 20), 1.0, 0.05)) < 1e-12
    c, s = math.cos(0.4), math.sin(0.4)
    R = np.array([[c, -s], [s, c]])
    assert abs(subtempered_norm_constant(np.array([R] * 25), 0.5, 1e-3) + 0.5 * 25) < 1e-12


def test_subtempered_matches_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        mats = np.array([random_sl2(rng) for _ in range(40)])
        lam, eps = 0.4, 0.05
        assert abs(subtempered_norm_constant(mats, lam, eps) - brute_subtempered(mats, lam, eps)) < 1e-10


def test_scalar_matrix_duality():
    rng = np.random.default_rng(5)
    xs = rng.uniform(0.0, 1.0, size=50)
    mats = np.array([np.diag([math.exp(x), math.exp(-x)]) for x in xs])
    L = np.concatenate([[0.0], np.cumsum(xs)])
    assert subtempered_norm_constant(lognorms=L, lam=0.5, eps=0.1) == tempered_constant(xs, 0.5, 0.1)
    assert abs(subtempered_norm_constant(mats, 0.5, 0.1) - tempered_constant(xs, 0.5, 0.1)) < 1e-12


# singular split

def test_split_diagonal():
    est = singular_split(np.diag([2.0, 0.5]))
    assert est.theta_s == math.pi / 2
    assert est.log_sigma1 == math.log(2)
    assert not est.degenerate


def test_split_rotation_degenerate():
    c, s = math.cos(0.3), math.sin(0.3)
    est = singular_split(np.array([[c, -s], [s, c]]))
    assert est.degenerate and est.theta_s == math.pi / 2


def test_split_random_against_svd():
    rng = np.random.default_rng(6)
    for _ in range(200):
        M = random_sl2(rng, scale=2.0)
        est = singular_split(M)
        ts, tu, s1 = svd_dirs(M)
        vs = np.array([math.cos(est.theta_s), math.sin(est.theta_s)])
        vu = np.array([math.cos(est.theta_u), math.sin(est.theta_u)])
        assert abs(np.linalg.norm(M @ vs) * np.linalg.norm(M @ vu) - 1) < 1e-10
        assert abs(est.log_sigma1 - math.log(s1)) < 1e-10
        assert abs((est.theta_s - est.theta_u) % math.pi - math.pi / 2) < 1e-15


def test_split_rejects_nonfinite():
    with pytest.raises(ValidationError):
        singular_split(np.array([[np.inf, 0], [0, 1]]))


# splitting certificate

def test_certificate_diagonal_passes():
    cert = splitting_certificate(_diag_cocycle(0.5, 40), 0.5, 0.01)
    assert cert.passed and cert.best_C_split == 0.0
    assert cert.first_violation is None


def test_certificate_rotation_block():
    D = _diag_cocycle(0.5, 40)
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    mats = np.concatenate([D[:20], [R] * 20, D[20:]])
    cert = splitting_certificate(mats, 0.5, 0.01, C=1.0)
    assert not cert.passed
    k, m, which = cert.first_violation
    assert which == 1
    assert 20 < k + m <= 40


def test_certificate_angle_decay_cat_pair():
    tup = make_tuple("cat_pair")
    tr = compose_word(tup, word_stream(1, 0, 2), 60, [0.1, 0.2])
    lam_hat = tr.lognorms[-1] / 60
    eps = 0.05
    cert = splitting_certificate(tr.factors, 0.5, eps)
    assert cert.decay_exponent >= 0.9 * 2 * (lam_hat - eps)


# cushion

def test_cushion_exact_growth():
    L = 0.5 * np.arange(11)
    assert cushion(lognorms=L, C0=0.0, lam=0.5, eps=0.1) == 0.0
    assert cushion(lognorms=L, C0=-5.0, lam=0.5, eps=0.1) == 5.0


def test_cushion_matches_oracle_and_series():
    rng = np.random.default_rng(7)
    mats = np.array([random_sl2(rng) for _ in range(30)])
    L = product_lognorms(mats)
    got = cushion(mats, C0=0.3, lam=0.2, eps=0.05)
    assert abs(got - brute_cushion(L, 0.3, 0.2, 0.05)) < 1e-10
    ser = cushion_series(mats, C0=0.3, lam=0.2, eps=0.05)
    for n in (1, 10, 30):
        assert abs(ser[n - 1] - brute_cushion(L[:n + 1], 0.3, 0.2, 0.05)) < 1e-10


# stopping

def test_never_fails():
    assert tempered_stopping(np.full(50, 0.5), lam=0.5, eps=0.0, C=-1.0) == NEVER


def test_dip_detected_at_its_index():
    lam, C = 0.5, -1.0
    for k in (1, 7, 30):
        xs = np.full(50, lam)
        xs[k - 1] -= 2 * abs(C) + 2 * lam
        assert tempered_stopping(xs, lam=lam, eps=0.0, C=C) == k


def test_reverse_return_contract():
    rng = np.random.default_rng(8)
    for _ in range(20):
        xs = rng.normal(0.5, 1.0, size=80)
        T = tempered_stopping(xs, "reverse_return", lam=0.2, eps=0.05, N=5, C0=-2.0)
        if T != NEVER:
            assert T >= 5
            assert tempered_constant(xs[:T], 0.2, 0.05, "reverse") >= -2.0


# Azuma

def test_azuma_formula():
    assert azuma_bound(np.ones(100), 30.0) == 2 * math.exp(-4.5)
    assert azuma_bound(np.ones(100), 0.0) == 1.0
    with pytest.raises(ValidationError):
        azuma_bound([1.0, 0.0], 1.0)


def test_tempered_tail_is_exponential():
    # iid increments with drift 0.5 checked at lam 0.3
    rng = np.random.default_rng(0)
    xs = rng.uniform(-0.5, 1.5, size=(400, 5000))
    P = np.vstack([np.zeros((1, 5000)), np.cumsum(xs, axis=0)])
    Cs = scan_min_batch(P, 0.3, 0.05)
    grid = np.arange(0.0, 8.0, 0.5)
    tail = np.array([np.mean(Cs < -c) for c in grid])
    fit = loglinear_fit(grid, tail)
    assert fit.slope < 0
    # the fitted line, shifted up by its worst residual, is an envelope
    resid = np.log(tail[tail > 0]) - (fit.intercept + fit.slope * grid[tail > 0])
    assert np.all(tail <= np.exp(fit.intercept + resid.max() + fit.slope * grid) + 1e-15)


def test_cushion_large_deviations_cat_pair():
    tup = make_tuple("cat_pair")
    W, N = 1000, 60
    syms = np.stack([word_stream(3, w, 2).symbols(N) for w in range(W)])
    _, jacs = orbit_words(tup, syms, np.broadcast_to([0.1, 0.2], (W, 2)))
    prods, ls = running_products(jacs)
    L = np.log(norm2(prods)) + ls
    L[0] = 0.0
    lam_hat = float(np.mean(L[-1])) / N
    delta = lam_hat / 4
    # lam close enough to lam_hat - delta that the event is visible at small n
    lam, eps = lam_hat - delta - 0.02, 0.3
    ns = np.arange(4, N + 1, 4)
    probs = []
    for n in ns:
        U = np.array([cushion(lognorms=L[:n + 1, w], C0=0.0, lam=lam, eps=eps) for w in range(W)])
        ok = np.array([subtempered_norm_constant(lognorms=L[:n + 1, w], lam=lam, eps=eps) >= -2
                       for w in range(W)])
        probs.append(np.mean(U[ok] < n * delta))
    fit = loglinear_fit(ns, np.array(probs))
    assert fit.npoints >= 5 and fit.slope < 0


def test_nearby_points_inherit_temperedness():
    tup = make_tuple("cat_pair_shear")
    rng = np.random.default_rng(0)
    sigma, n, D = 0.2, 20, 0.05  # D calibrated at 6.2e-3 on this tuple
    for w in range(100):
        syms = word_stream(11, w, 2).symbols(n)
        x = rng.random(2)
        Lx = compose_word(tup, syms, n, x).lognorms
        if subtempered_norm_constant(lognorms=Lx, lam=0.5, eps=0.05) < -3:
            continue
        r = math.exp(-(1 + sigma) * Lx[-1])
        th = rng.uniform(0, 2 * math.pi)
        y = x + r * np.array([math.cos(th), math.sin(th)])
        Ly = compose_word(tup, syms, n, y).lognorms
        assert Ly[-1] >= (1 - sigma) * Lx[-1]
        Ux = cushion(lognorms=Lx, C0=0.0, lam=0.5, eps=0.05)
        Uy = cushion(lognorms=Ly, C0=0.0, lam=0.5, eps=0.05)
        assert abs(Ux - Uy) <= D


# stable directions

def test_single_cat_dirac():
    h = stable_direction_distribution(make_tuple("single_cat"), [0.1, 0.2], 20, 50)
    assert h.counts.max() == h.total == h.counts.sum()
    w, V = np.linalg.eig(CAT)
    v = V[:, np.argmin(w)]
    ts = math.atan2(v[1], v[0]) % math.pi
    assert np.argmax(h.counts) == int(ts / (math.pi / h.bins))


def test_cat_pair_base_point_independence():
    tup = make_tuple("cat_pair")
    h1 = stable_direction_distribution(tup, [0.1, 0.2], 30, 2000)
    same = stable_direction_distribution(tup, [0.7, 0.4], 30, 2000)
    assert histogram_tv(h1, same) == 0.0  # same words, linear cocycle
    h2 = stable_direction_distribution(tup, [0.7, 0.4], 30, 2000, stream0=5000)
    mean, sd = bootstrap_tv_null(h1.thetas)
    assert histogram_tv(h1, h2) <= mean + 3 * sd


def test_cat_pair_mass_profile_exponent():
    h = stable_direction_distribution(make_tuple("cat_pair"), [0.1, 0.2], 30, 2000)
    assert h.alpha > 0 and h.alpha_fit.r2 >= 0.9
    assert h.counts.sum() == h.total
    assert np.allclose(np.diff(h.edges), math.pi / 256)
