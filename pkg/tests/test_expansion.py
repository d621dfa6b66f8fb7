import math

import numpy as np
import pytest

from rdslab.expansion import eoa_exact, eoa_monte_carlo, eoa_search, hoeffding_halfwidth
from rdslab.rds_core import ValidationError, make_tuple, tuple_from_matrices

from oracles import brute_eoa

CAT = np.array([[2.0, 1.0], [1.0, 1.0]])
GOLD = math.log((3 + math.sqrt(5)) / 2)


def _eigdir(A, which):
    w, V = np.linalg.eig(A)
    v = V[:, np.argmin(w) if which == "s" else np.argmax(w)]
    return math.atan2(v[1], v[0]) % math.pi


def test_single_cat_fails_at_stable_direction():
    ts = _eigdir(CAT, "s")
    rep = eoa_exact(make_tuple("single_cat"), 3, G=4, D=16, extra_directions=[ts])
    assert abs(rep.lambda_min + GOLD) < 1e-6
    assert abs(rep.argmin[1] - ts) < 1e-12
    assert not rep.passed


def test_rotations_zero():
    rep = eoa_exact(make_tuple("rotations"), 3, G=4, D=16)
    assert abs(rep.lambda_min) < 1e-12
    assert np.max(np.abs(rep.mean)) < 1e-12
    assert not rep.passed


def test_inverse_pair_cancels_at_eigendirection():
    tup = tuple_from_matrices([CAT, np.linalg.inv(CAT)])
    tu = _eigdir(CAT, "u")
    rep = eoa_exact(tup, 1, G=2, D=4, extra_directions=[tu])
    i = np.nonzero(np.abs(rep.theta - tu) < 1e-12)[0]
    assert np.max(np.abs(rep.mean[i])) < 1e-12


def test_exact_matches_enumeration_oracle():
    tup = make_tuple("cat_pair")
    mats = [f.jac(np.zeros(2)) for f in tup.maps]
    rep = eoa_exact(tup, 5, G=1, D=8)
    for th, v in zip(rep.theta, rep.mean):
        assert abs(v - brute_eoa(mats, 5, th)) < 1e-12


def test_reorder_invariance():
    a = make_tuple("cat_pair_shear")
    b = type(a)(a.maps[::-1], a.c1_bound, a.c2_bound)
    ra = eoa_exact(a, 3, G=3, D=8)
    rb = eoa_exact(b, 3, G=3, D=8)
    assert np.allclose(ra.mean, rb.mean, atol=1e-12)


def test_cap_error():
    with pytest.raises(ValidationError, match="monte_carlo"):
        eoa_exact(make_tuple("cat_pair"), 21, G=1, D=1)


def test_monte_carlo_lower_bound_below_exact():
    tup = make_tuple("cat_pair")
    mc = eoa_monte_carlo(tup, 4, 2000, G=2, D=16)
    ex = eoa_exact(tup, 4, G=2, D=16)
    assert np.all(mc.mean - mc.halfwidth <= ex.mean + 1e-12)


def test_hoeffding_formula():
    assert hoeffding_halfwidth(1.0, 0.05, 2000) == math.sqrt(math.log(40) / 4000)
    with pytest.raises(ValidationError):
        eoa_monte_carlo(make_tuple("cat_pair"), 2, 0)


def test_grid_refinement_monotone():
    tup = make_tuple("cat_pair_shear")
    coarse = eoa_exact(tup, 2, G=4, D=16)
    fine = eoa_exact(tup, 2, G=8, D=32)   # superset of the coarse grid
    assert fine.lambda_min <= coarse.lambda_min + 1e-15


def test_single_hyperbolic_map_always_detected():
    rep = eoa_exact(make_tuple("single_cat"), 2, G=2, D=64)
    assert rep.lambda_min < 0


def test_search_escalates_to_pass():
    reps = eoa_search(make_tuple("cat_pair"), n0_max=8, G=2, D=64)
    assert reps[-1].passed
    assert [r.n0 for r in reps] == list(range(1, len(reps) + 1))
    assert "heuristic" in reps[-1].warnings[0]
