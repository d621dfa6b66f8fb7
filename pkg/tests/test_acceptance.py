"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import hashlib
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from rdslab.cocycle import (azuma_bound, cushion, pooled_angle_decay, splitting_certificate,
                            subtempered_norm_constant, tempered_constant)
from rdslab.coupling import CouplingParams, run_coupling_ensemble, summarize
from rdslab.expansion import eoa_exact
from rdslab.fitting import linfit, loglinear_fit
from rdslab.mixing import (Observable, annealed_from, c_omega_tail, decoherence_horizon,
                           pooled_rate_fit, quenched_correlation, rate_fit)
from rdslab.pairs import GoodTimeParams, recovery_experiment, segment_pair
from rdslab.pesin import (CurveChart, LocalMap, TrigField, bounds_hold, fake_holonomy,
                          fake_stable_leaf, graph_transform_step, leaf_crossing, lyapunov_metric,
                          wedin_angle_bound)
from rdslab.rds_core import compose_word, make_tuple, unit, word_stream

from oracles import (brute_cushion, brute_eoa, brute_subtempered, brute_tempered,
                     product_lognorms, random_sl2)

X0 = np.array([0.3, 0.4])
GOLD = math.log((3 + math.sqrt(5)) / 2)


@pytest.fixture
def verdict(capsys):
    def emit(num, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {num:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")
        assert ok, f"criterion {num} failed: {detail}"
    return emit


def test_01_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    scalar_bad = matrix_err = cushion_err = 0.0
    t_lib = 0.0
    for _ in range(1000):
        xs = rng.normal(0.5, 1.0, size=int(rng.integers(1, 40)))
        lam, eps = rng.uniform(0.05, 1.0), rng.uniform(0.0, 0.2)
        mats = np.array([random_sl2(rng) for _ in range(int(rng.integers(1, 20)))])
        C0 = rng.uniform(-1, 1)
        t0 = time.perf_counter()
        a = tempered_constant(xs, lam, eps)
        b = subtempered_norm_constant(mats, lam, eps)
        c = cushion(mats, C0=C0, lam=lam, eps=eps)
        t_lib += time.perf_counter() - t0
        scalar_bad += a != brute_tempered(xs, lam, eps)
        matrix_err = max(matrix_err, abs(b - brute_subtempered(mats, lam, eps)))
        cushion_err = max(cushion_err, abs(c - brute_cushion(product_lognorms(mats), C0, lam, eps)))
    ok = scalar_bad == 0 and matrix_err <= 1e-10 and cushion_err <= 1e-10 and t_lib < 10
    verdict(1, "oracle equivalence", ok,
            f"scalar mismatches {int(scalar_bad)}, matrix err {matrix_err:.1e}, "
            f"cushion err {cushion_err:.1e}, {t_lib:.2f} s")


def test_02_expansion_verdicts(verdict):
    t0 = time.perf_counter()
    w, V = np.linalg.eig(np.array([[2.0, 1.0], [1.0, 1.0]]))
    v = V[:, np.argmin(w)]
    ts = math.atan2(v[1], v[0]) % math.pi
    single = eoa_exact(make_tuple("single_cat"), 3, G=4, D=16, extra_directions=[ts])
    rot = eoa_exact(make_tuple("rotations"), 3, G=4, D=16)
    probes = [0.1, 1.0, 2.5]
    tup = make_tuple("cat_pair")
    pair = eoa_exact(tup, 10, G=2, D=32, extra_directions=probes)
    mats = [f.jac(np.zeros(2)) for f in tup.maps]
    probe_err = 0.0
    for th in probes:
        i = int(np.argmin(np.abs(pair.theta - th)))
        probe_err = max(probe_err, abs(pair.mean[i] - brute_eoa(mats, 10, th)))
    dt = time.perf_counter() - t0
    ok = (abs(single.lambda_min + GOLD) <= 1e-6 and abs(rot.lambda_min) <= 1e-12
          and pair.lambda_min > 0.3 and probe_err < 1e-10 and dt < 60)
    verdict(2, "expansion-on-average verdicts", ok,
            f"single {single.lambda_min:.9f}, rotations {rot.lambda_min:.1e}, "
            f"cat_pair {pair.lambda_min:.4f} (probe err {probe_err:.1e}), {dt:.1f} s")


def test_03_azuma(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n, trials = 100, 100_000
    S = np.zeros(trials)
    for _ in range(n):
        S += rng.integers(0, 2, size=trials) * 2 - 1
    worst = -np.inf
    for t in (10, 20, 30):
        worst = max(worst, np.mean(np.abs(S) >= t) - azuma_bound(np.ones(n), t))
    dt = time.perf_counter() - t0
    verdict(3, "Azuma tails", worst <= 0 and dt < 10, f"max excess {worst:.4f}, {dt:.2f} s")


def test_04_angle_decay(verdict):
    tup = make_tuple("cat_pair")
    eps, n = 0.05, 60
    trs = [compose_word(tup, word_stream(4, s, 2), n, [0.1, 0.2]) for s in range(50)]
    lam_hat = float(np.mean([tr.lognorms[-1] for tr in trs])) / n
    fit = pooled_angle_decay([tr.factors for tr in trs], lam_hat - eps, eps)
    need = 0.9 * 2 * (lam_hat - eps)
    ok = -fit.slope >= need and fit.r2 >= 0.9
    verdict(4, "angle decay", ok, f"exponent {-fit.slope:.3f} vs {need:.3f}, R2 {fit.r2:.3f}")


def _admissible_pair(rng):
    s = rng.uniform(2.0, 30.0)
    a, b = rng.uniform(0, math.pi, 2)
    R = lambda t: np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    A = R(a) @ np.diag([s, 1 / s]) @ R(b)
    while True:
        s2 = s * math.exp(rng.normal(0, 0.2))
        da, db = rng.normal(0, 0.3, 2)
        B = R(a + da) @ np.diag([s2, 1 / s2]) @ R(b + db)
        if np.linalg.norm(B - A, 2) <= s / 2:
            return A, B - A


def test_05_wedin(verdict):
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(10_000):
        A, E = _admissible_pair(rng)
        bound, actual = wedin_angle_bound(A, E)
        bad += actual > bound * (1 + 1e-12)
    verdict(5, "Wedin bound", bad == 0, f"violations {bad} / 10000")


def test_06_lyapunov_metric(verdict):
    tup = make_tuple("cat_pair_shear")
    rng = np.random.default_rng(6)
    total, used = 0, 0
    for s in range(100):
        tr = compose_word(tup, word_stream(6, s, 2), 80, rng.random(2))
        cert = splitting_certificate(tr.factors, 0.6, 0.05)
        m = lyapunov_metric(tr.factors, cert, 0.4)
        total += sum(m.violations().values())
        used += 1
    verdict(6, "Lyapunov metric", total == 0 and used == 100, f"violations {total} over {used} cocycles")


def _random_local_map(rng):
    s1 = rng.uniform(1.5, 3.0)
    s2 = rng.uniform(0.2, 1 / 1.5)
    terms = lambda k: tuple((int(rng.integers(-2, 3)), int(rng.integers(-2, 3)),
                             rng.uniform(-1, 1) * 1e-3, rng.uniform(0, 2 * math.pi)) for _ in range(k))
    return LocalMap(s1, s2, TrigField(terms(2)), TrigField(terms(2)))


def test_07_graph_transform(verdict):
    rng = np.random.default_rng(7)
    fails = 0
    for _ in range(100):
        F = _random_local_map(rng)
        amp, k = rng.uniform(0, 0.001), int(rng.integers(1, 4))
        c = CurveChart.from_function(lambda x: amp * np.sin(k * x), -0.3, 0.3, 201)
        c = graph_transform_step(F, c, window=(-0.3, 0.3))
        fails += not bounds_hold(c)
    lin = graph_transform_step(LocalMap(2.0, 0.5),
                               CurveChart.from_function(lambda x: 0.3 * x, -1, 1, 201))
    lin_err = float(np.max(np.abs(lin.phi - 0.075 * lin.x)))
    F = LocalMap(2.0, 0.5, TrigField(((1, 0, 0.003, 0.0), (1, 1, 0.002, 0.3))),
                 TrigField(((0, 1, 0.002, 0.1),)))
    c = CurveChart.from_function(lambda x: np.sin(2 * np.pi * x) / (2 * np.pi), -0.5, 0.5, 201)
    c1_start = c.c1()
    for _ in range(40):
        c = graph_transform_step(F, c, window=(-0.5, 0.5))
    ok = fails == 0 and lin_err <= 1e-12 and c.c1() < 1e-6
    verdict(7, "graph transform", ok,
            f"bound failures {fails}/100, linear err {lin_err:.1e}, "
            f"C1 {c1_start:.3f} -> {c.c1():.1e}")


def _fluctuation_slope(family):
    tup = make_tuple(family)
    w = word_stream(0, 0, tup.m)
    lf = fake_stable_leaf(tup, w, X0, 30, 0.05)
    es = unit(lf.theta_s)
    G = CurveChart.segment(X0 + 0.03 * es, lf.theta_s + math.pi / 2, 0.02)
    us, ln = [], []
    for n in range(1, 26):
        lf = fake_stable_leaf(tup, w, X0, n, 0.05)
        us.append(leaf_crossing(lf, G)[1])
        ln.append(math.log(lf.sigma1))
    d = np.abs(np.diff(us))
    keep = d > 1e-14
    return linfit(np.array(ln[:-1])[keep], np.log(d[keep])).slope


def test_08_fake_leaves(verdict):
    lin = make_tuple("cat_pair")
    lf = fake_stable_leaf(lin, word_stream(0, 0, 2), X0, 12, 0.05)
    es = unit(lf.theta_s)
    d = lf.nodes - X0
    straight = float(np.max(np.abs(d[:, 0] * es[1] - d[:, 1] * es[0])))
    s_lin = _fluctuation_slope("cat_pair")
    s_shear = _fluctuation_slope("cat_pair_shear")
    tup = make_tuple("cat_pair_shear")
    n, bad, tot = 20, 0, 0
    for s in range(10):
        lf = fake_stable_leaf(tup, word_stream(0, s, 2), X0, n, 0.05, keep_history=True)
        dist = np.hypot(*(lf.history[:, -1] - lf.history[:, 0]).T)
        lam_p = 0.5 * math.log(lf.sigma1) / n
        over = dist > 2 * dist[0] * np.exp(-lam_p * np.arange(n + 1))
        bad += int(over.sum())
        tot += len(over)
    ok = straight <= 1e-9 and s_lin <= -1.9 and s_shear <= -1.5 and bad / tot <= 0.01
    verdict(8, "fake stable leaves", ok,
            f"straightness {straight:.1e}, slopes {s_lin:.2f} / {s_shear:.2f}, "
            f"contraction violations {bad}/{tot}")


def _transversals(tup, w, n):
    lf = fake_stable_leaf(tup, w, X0, n, 0.05)
    es = unit(lf.theta_s)
    th = lf.theta_s + math.pi / 2
    return CurveChart.segment(X0 - 0.02 * es, th, 0.02), CurveChart.segment(X0 + 0.02 * es, th, 0.02)


def test_09_holonomy(verdict):
    src = np.linspace(0.005, 0.035, 7)
    lin = make_tuple("single_cat")
    T1, T2 = _transversals(lin, [0] * 10, 10)
    h = fake_holonomy(lin, [0] * 10, 10, T1, T2, src, 0.05)
    lin_err = float(np.max(np.abs(h.jac_formula - 1)))
    tup = make_tuple("cat_pair_shear")
    w = word_stream(0, 0, 2)
    fd_err = 0.0
    for n in (8, 10, 12):
        T1, T2 = _transversals(tup, w, n)
        h = fake_holonomy(tup, w, n, T1, T2, src, 0.05)
        fd_err = max(fd_err, float(np.max(np.abs(h.jac_formula / h.jac_fd - 1))))
    T1, T2 = _transversals(tup, w, 16)
    ns = list(range(4, 17, 2))
    J = np.array([fake_holonomy(tup, w, n, T1, T2, src[::2], 0.05).jac_formula for n in ns])
    fit = loglinear_fit(np.array(ns[1:]), np.max(np.abs(np.diff(J, axis=0)), axis=1))
    ok = lin_err <= 1e-8 and fd_err <= 1e-4 and -fit.slope > 0
    verdict(9, "holonomy Jacobians", ok,
            f"linear err {lin_err:.1e}, formula vs fd {fd_err:.1e}, decay rate {-fit.slope:.3f}")


def test_10_recovery(verdict):
    tup = make_tuple("cat_pair_shear")
    d = unit(2.124)
    pair = segment_pair(X0 - 0.2 * d, X0 + 0.2 * d, 2e-3)
    pair = pair.scaled(1.0 / pair.mass)
    gp = GoodTimeParams(C=2.0, lam=0.5, eps=0.05, A=2.0, eps_prime=0.1, R=0.0)
    res = recovery_experiment(tup, pair, 1000, gp, horizon=120, with_goodness=20)
    R = res.R_at_T[np.isfinite(res.R_at_T)]
    ok = -res.tail_fit.slope > 0 and res.tail_fit.r2 >= 0.8 and len(R) > 0 and np.all(R <= 1.5)
    verdict(10, "recovery", ok,
            f"rate {-res.tail_fit.slope:.3f}, R2 {res.tail_fit.r2:.3f}, "
            f"max R {R.max():.3f} over {len(R)} blocks (C0 1.5)")


def test_11_coupling(verdict):
    tup = make_tuple("cat_pair_shear")
    params = CouplingParams()
    ln2 = lambda s: np.full_like(s, math.log(2))
    p1 = segment_pair([0.1, 0.25], [0.6, 0.25], params.mesh, logrho=ln2)
    p2 = segment_pair([0.7, 0.2], [0.7, 0.7], params.mesh, logrho=ln2)
    t0 = time.perf_counter()
    runs = run_coupling_ensemble(tup, p1, p2, 0, range(10), params)
    s = summarize(tup, runs, 0, params)
    dt = time.perf_counter() - t0
    ok = (s.p > 0 and s.envelope_ok and s.contraction_violations <= 0.05
          and s.tail_fit.slope < 0 and s.tail_fit.r2 >= 0.8 and dt < 600)
    verdict(11, "coupling", ok,
            f"p {s.p:.3f}, envelope {s.envelope_ok}, contraction violations "
            f"{s.contraction_violations:.3f} of {s.samples}, tail slope {s.tail_fit.slope:.3f} "
            f"R2 {s.tail_fit.r2:.3f}, {dt:.0f} s")


def test_12_mixing(verdict):
    cos_x = Observable.cos(1, 0)
    det = quenched_correlation(make_tuple("single_cat"), [0] * 20, cos_x, cos_x, 20, N=64)
    det_err = float(np.max(np.abs(det.C[1:])))
    tup = make_tuple("cat_pair_shear", K=0.1)
    H = decoherence_horizon(tup, cos_x, cos_x, 512)
    series = [quenched_correlation(tup, word_stream(0, s, 2), cos_x, cos_x, 12, N=512, stream=s)
              for s in range(50)]
    fits = [rate_fit(q, window=(0, H)) for q in series]
    pooled = pooled_rate_fit(series, window=(0, H))
    frac = float(np.mean([f.r2 >= 0.8 for f in fits]))
    ann = annealed_from(series)
    bitwise = np.array_equal(ann.C, np.mean(np.stack([q.C for q in series]), axis=0))
    tail = c_omega_tail(tup, cos_x, cos_x, 12, range(50), window=(0, H), series=series)
    ok = (det_err <= 1e-12 and all(f.eta_hat > 0 for f in fits) and pooled.r2 >= 0.8
          and bitwise and tail.slope <= -0.8)
    verdict(12, "mixing", ok,
            f"deterministic {det_err:.1e}, pooled quenched eta {pooled.eta_hat:.2f} "
            f"R2 {pooled.r2:.3f} (per-word R2 >= 0.8 on {frac:.0%}), annealed bitwise {bitwise}, "
            f"C_omega tail slope {tail.slope:.2f}")


def _cli_csvs(tmp_path, kind, cfg, threads):
    path = tmp_path / f"{kind}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / f"{kind}-{threads}"
    env = dict(os.environ, RDSLAB_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "rdslab.cli", kind, "--config", str(path), "--out", str(out)],
                   check=True, env=env, capture_output=True)
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.glob("*.csv"))}


def test_13_determinism(verdict, tmp_path):
    cases = {
        "tempered": {"streams": 6, "params": {"n": 60}},
        "mixing": {"streams": 4, "params": {"nmax": 8, "N": 128}},
        "recovery": {"streams": 30, "params": {"horizon": 40, "with_goodness": 3}},
        "couple": {"streams": 2, "params": {"coupling": {"horizon": 6}}},
    }
    differ = []
    n = 0
    for kind, cfg in cases.items():
        a = _cli_csvs(tmp_path, kind, cfg, 1)
        b = _cli_csvs(tmp_path, kind, cfg, 2)
        n += len(a)
        if a != b or not a:
            differ.append(kind)
    verdict(13, "determinism across worker counts", not differ,
            f"{n} CSVs compared, differing experiments: {differ or 'none'}")
