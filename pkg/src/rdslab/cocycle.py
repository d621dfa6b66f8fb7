"""Temperedness calculus for scalar sequences and 2x2 matrix cocycles.

A real sequence x_1..x_n is (C, lam, eps)-tempered when every window sum
satisfies  sum_{j<i<=k} x_i - lam (k - j) + eps j >= C  for 0 <= j < k <= n.
Every check below reports the extremal constant C* instead of a boolean.

All scans share one arithmetic: with prefix sums P (P[0] = 0),

    a[k] = P[k] - lam k,   b[j] = P[j] - lam j - eps j,
    C*   = min_k ( a[k] - max_{j<k} b[j] ).

Floating subtraction is monotone, so this equals the pairwise minimum of
a[k] - b[j] bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fitting import LineFit, loglinear_fit, loglog_fit
from .rds_core import (
    MapTuple,
    ValidationError,
    angle_dist,
    angle_of,
    inv_sl2,
    matvec,
    norm2,
    orbit_words,
    running_products,
    unit,
    word_stream,
)

NEVER = 1 << 62
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class TemperedParams:
    C: float
    lam: float
    eps: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be > 0")
        if not self.eps >= 0:
            raise ValidationError("eps must be >= 0")


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def _prefix(xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or len(xs) == 0:
        raise ValidationError("tempered constant needs a non-empty sequence")
    return np.concatenate([[0.0], np.cumsum(xs)])


def _scan_terms(P: np.ndarray, lam: float, eps: float):
    """Per-k minima over j < k of the window quantity, and the argmax j."""
    idx = np.arange(len(P), dtype=float)
    a = P - lam * idx
    b = P - lam * idx - eps * idx
    bmax = np.maximum.accumulate(b)[:-1]
    vals = a[1:] - bmax
    return a, b, bmax, vals


def scan_min(P, lam: float, eps: float, return_argmin: bool = False):
    """min over 0 <= j < k <= n of P[k] - P[j] - lam (k - j) + eps j."""
    P = np.asarray(P, dtype=float)
    if len(P) < 2:
        raise ValidationError("tempered constant needs a non-empty sequence")
    a, b, bmax, vals = _scan_terms(P, lam, eps)
    cstar = float(vals.min())
    if not return_argmin:
        return cstar
    best = None
    for k1 in np.nonzero(vals == cstar)[0]:
        k = int(k1) + 1
        j = int(np.argmax(b[:k] == bmax[k1]))
        if best is None or (j, k) < best:
            best = (j, k)
    return cstar, best


def scan_min_batch(P, lam: float, eps: float):
    """scan_min along axis 0 for every trailing batch index."""
    P = np.asarray(P, dtype=float)
    idx = np.arange(P.shape[0], dtype=float).reshape((-1,) + (1,) * (P.ndim - 1))
    a = P - lam * idx
    b = P - (lam + eps) * idx
    bmax = np.maximum.accumulate(b, axis=0)[:-1]
    return np.min(a[1:] - bmax, axis=0)


def split_constant_batch(tr: "SplitTrajectory", lam: float, eps: float) -> np.ndarray:
    """Smallest C making each batched trajectory a (C, lam, eps)-tempered splitting."""
    k = np.arange(tr.angle.shape[0], dtype=float).reshape((-1,) + (1,) * (tr.angle.ndim - 1))
    with np.errstate(divide="ignore"):
        r3 = np.max(-np.log(tr.angle) - eps * k, axis=0)
    return np.maximum(np.maximum(-scan_min_batch(tr.Lu, lam, eps), -scan_min_batch(-tr.Ls, lam, eps)), r3)


def tempered_constant(xs, lam: float, eps: float, direction: str = "forward",
                      return_argmin: bool = False):
    """Largest C for which xs is (C, lam, eps)-tempered.

    ``direction='reverse'`` applies the definition to the reversed sequence.
    With ``return_argmin`` also returns the lexicographically smallest
    minimizing window (j, k).
    """
    xs = np.asarray(xs, dtype=float)
    if direction == "reverse":
        xs = xs[::-1]
    elif direction != "forward":
        raise ValidationError(f"unknown direction {direction!r}")
    return scan_min(_prefix(xs), lam, eps, return_argmin)


def _lognorms(mats=None, lognorms=None) -> np.ndarray:
    if lognorms is not None:
        L = np.asarray(lognorms, dtype=float)
        if L[0] != 0.0:
            L = np.concatenate([[0.0], L])
        return L
    mats = np.asarray(mats, dtype=float)
    if mats.ndim != 3 or len(mats) == 0:
        raise ValidationError("need a non-empty sequence of 2x2 matrices")
    prods, ls = running_products(mats)
    L = np.log(norm2(prods)) + ls
    L[0] = 0.0
    return L


def subtempered_norm_constant(mats=None, lam: float = 1.0, eps: float = 0.0,
                              lognorms=None, return_argmin: bool = False):
    """min over i >= 1, j >= 0 of ln||A^{i+j}|| - ln||A^j|| - lam i + eps j."""
    L = _lognorms(mats, lognorms)
    return scan_min(L, lam, eps, return_argmin)


def cushion(mats=None, C0: float = 0.0, lam: float = 1.0, eps: float = 0.0,
            lognorms=None) -> float:
    """U = min_{0<=k<n} ln||A^n|| - ln||A^k|| - C0 - (n-k) lam + eps k."""
    L = _lognorms(mats, lognorms)
    n = len(L) - 1
    k = np.arange(n, dtype=float)
    vals = (L[n] - lam * n) - (L[:n] - lam * k - eps * k) - C0
    return float(vals.min())


def cushion_series(mats=None, C0: float = 0.0, lam: float = 1.0, eps: float = 0.0,
                   lognorms=None) -> np.ndarray:
    """Cushion of every prefix n = 1..N in one pass."""
    L = _lognorms(mats, lognorms)
    idx = np.arange(len(L), dtype=float)
    a = L - lam * idx
    b = L - lam * idx - eps * idx
    bmax = np.maximum.accumulate(b)[:-1]
    return a[1:] - bmax - C0


# ---------------------------------------------------------------------------
# singular directions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitEstimate:
    theta_s: float
    theta_u: float
    log_sigma1: float
    degenerate: bool


def _right_split(M):
    """Angle of the most expanded right singular vector and ln sigma_1."""
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    p = a * a + c * c
    q = a * b + c * d
    r = b * b + d * d
    theta_u = np.mod(0.5 * np.arctan2(2.0 * q, p - r), math.pi)
    s1sq = 0.5 * (p + r) + np.hypot(0.5 * (p - r), q)
    return theta_u, 0.5 * np.log(s1sq)


def _transpose(M):
    return np.swapaxes(M, -1, -2)


def singular_split(M, logscale: float = 0.0) -> SplitEstimate:
    """Singular directions of an SL(2,R) product given as M * exp(logscale)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)) or not math.isfinite(logscale):
        raise ValidationError("non-finite product entries")
    tu, ls1 = _right_split(M)
    ls1 = float(ls1) + float(logscale)
    if ls1 <= DEGENERATE_TOL:
        return SplitEstimate(math.pi / 2, 0.0, max(ls1, 0.0), True)
    tu = float(tu)
    return SplitEstimate(float(np.mod(tu + math.pi / 2, math.pi)), tu, ls1, False)


@dataclass
class SplitTrajectory:
    """Orbits of the split vectors s_n, u_n of A^n under the prefix products.

    Lu[k] = ln||A^k u||, Ls[k] = ln||A^k s||, angle[k] = angle(A^k s, A^k u).
    Arrays have shape (n+1, ...) over any batch axes of the factors.
    """

    theta_s: np.ndarray
    theta_u: np.ndarray
    log_sigma1: np.ndarray
    degenerate: np.ndarray
    Lu: np.ndarray
    Ls: np.ndarray
    angle: np.ndarray
    dir_s: np.ndarray
    dir_u: np.ndarray


def split_trajectories(factors) -> SplitTrajectory:
    """Follow s_n forward and u_n forward without cancellation.

    u_n is pushed forward with per-step normalization.  s_n is recovered
    backwards from A^n s_n = sigma_2 w, w the least left singular vector,
    using exact adjugate inverses, so its tiny images stay accurate.
    """
    F = np.asarray(factors, dtype=float)
    n = F.shape[0]
    batch = F.shape[1:-2]
    prods, ls = running_products(F)
    Pn = prods[-1]
    tu, lsig = _right_split(Pn)
    lsig = lsig + ls[-1]
    deg = lsig <= DEGENERATE_TOL
    tu = np.where(deg, 0.0, tu)
    ts = np.mod(tu + math.pi / 2, math.pi)

    dir_u = np.empty((n + 1,) + batch + (2,))
    Lu = np.zeros((n + 1,) + batch)
    v = unit(tu)
    dir_u[0] = v
    for k in range(n):
        w = matvec(F[k], v)
        r = np.hypot(w[..., 0], w[..., 1])
        Lu[k + 1] = Lu[k] + np.log(r)
        v = w / r[..., None]
        dir_u[k + 1] = v

    # backward from the left stable direction
    tlu, _ = _right_split(_transpose(Pn))
    v = unit(tlu + math.pi / 2)
    dir_b = np.empty((n + 1,) + batch + (2,))
    logr = np.empty((n + 1,) + batch)
    dir_b[n] = v
    logr[n] = -lsig
    Finv = inv_sl2(F)
    for k in range(n, 0, -1):
        w = matvec(Finv[k - 1], v)
        r = np.hypot(w[..., 0], w[..., 1])
        logr[k - 1] = logr[k] + np.log(r)
        v = w / r[..., None]
        dir_b[k - 1] = v
    Ls_b = logr - logr[0]

    # forward from the default direction (used only when degenerate)
    dir_f = np.empty_like(dir_b)
    Ls_f = np.zeros_like(Ls_b)
    v = unit(ts)
    dir_f[0] = v
    for k in range(n):
        w = matvec(F[k], v)
        r = np.hypot(w[..., 0], w[..., 1])
        Ls_f[k + 1] = Ls_f[k] + np.log(r)
        v = w / r[..., None]
        dir_f[k + 1] = v

    dir_s = np.where(deg[..., None], dir_f, dir_b)
    Ls = np.where(deg, Ls_f, Ls_b)
    theta_s = np.where(deg, ts, angle_of(dir_b[0]))
    angle = angle_dist(angle_of(dir_s), angle_of(dir_u))
    return SplitTrajectory(theta_s, tu, np.maximum(lsig, 0.0), deg, Lu, Ls, angle, dir_s, dir_u)


# ---------------------------------------------------------------------------
# splitting certificate
# ---------------------------------------------------------------------------

@dataclass
class SplittingCertificate:
    params: TemperedParams
    best_C_split: float
    required: tuple  # smallest C for each of the three inequalities
    angle_table: np.ndarray  # rows (m, angle(s_m, s_{m+1}))
    angle_fit: LineFit
    N0: int
    passed: bool
    first_violation: tuple | None = None  # (k, m, inequality 1..3)

    @property
    def decay_exponent(self) -> float:
        return -self.angle_fit.slope


def _split_requirements(Lu, Ls, ang, lam, eps):
    r1 = 0.0 - scan_min(Lu, lam, eps)
    r2 = 0.0 - scan_min(-Ls, lam, eps)
    k = np.arange(len(ang), dtype=float)
    with np.errstate(divide="ignore"):
        r3 = float(np.max(-np.log(ang) - eps * k))
    return r1, r2, r3


def _first_violation(Lu, Ls, ang, C, lam, eps):
    n = len(Lu) - 1
    k = np.arange(n + 1)[:, None]
    kk = np.arange(n + 1)[None, :]  # end index k + m
    m = kk - k
    valid = m >= 1
    fk = k.astype(float)
    fm = m.astype(float)
    g1 = (Lu[kk] - Lu[k]) >= -C + lam * fm - eps * fk
    g2 = (Ls[kk] - Ls[k]) <= C - lam * fm + eps * fk
    with np.errstate(divide="ignore"):
        g3 = np.log(ang) >= -C - eps * np.arange(n + 1)
    cands = []
    for which, good in ((1, g1), (2, g2)):
        bad = valid & ~good
        if np.any(bad):
            ks, ends = np.nonzero(bad)
            order = np.lexsort((ks, ends))[0]
            cands.append((int(ends[order]), int(ks[order]), which))
    bad3 = np.nonzero(~g3)[0]
    if len(bad3):
        cands.append((int(bad3[0]), int(bad3[0]), 3))
    if not cands:
        return None
    end, kv, which = min(cands)
    return (kv, end - kv, which)


def splitting_certificate(mats, lam: float, eps: float, C: float | None = None,
                          angle_floor: float = 1e-12) -> SplittingCertificate:
    """Check the tempered-splitting inequalities for s = s_n, u = u_n.

    Inequalities, for k >= 0, m >= 1, k + m <= n:
      1. ln||A^{k+m} u|| - ln||A^k u|| >= -C + lam m - eps k
      2. ln||A^{k+m} s|| - ln||A^k s|| <=  C - lam m + eps k
      3. angle(A^k s, A^k u) >= exp(-C - eps k)
    ``C=None`` certifies with the smallest admissible constant.
    """
    mats = np.asarray(mats, dtype=float)
    tr = split_trajectories(mats)
    r = _split_requirements(tr.Lu, tr.Ls, tr.angle, lam, eps)
    best = float(max(r)) + 0.0
    Cuse = best if C is None else float(C)
    passed = best <= Cuse
    viol = None if passed else _first_violation(tr.Lu, tr.Ls, tr.angle, Cuse, lam, eps)

    n = len(mats)
    N0 = max(1, math.ceil((max(Cuse, 0.0) + math.log(2)) / lam))
    prods, _ = running_products(mats)
    tu_all, _ = _right_split(prods[1:])
    ts_all = np.mod(tu_all + math.pi / 2, math.pi)
    ms = np.arange(1, n)
    angs = angle_dist(ts_all[:-1], ts_all[1:])
    keep = ms >= N0
    table = np.column_stack([ms[keep], angs[keep]]) if n > 1 else np.zeros((0, 2))
    fit = loglinear_fit(table[:, 0], table[:, 1], floor=angle_floor)
    return SplittingCertificate(
        TemperedParams(Cuse, lam, eps), best, r, table, fit, N0, passed, viol
    )


def pooled_angle_decay(mats_list, lam: float, eps: float, N0: int | None = None,
                       floor: float = 1e-12) -> LineFit:
    """Fit ln angle(s_m, s_{m+1}) against m, pooled over several sequences."""
    xs, ys = [], []
    for mats in mats_list:
        prods, _ = running_products(np.asarray(mats, dtype=float))
        tu, _ = _right_split(prods[1:])
        ts = np.mod(tu + math.pi / 2, math.pi)
        m = np.arange(1, len(ts))
        xs.append(m)
        ys.append(angle_dist(ts[:-1], ts[1:]))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if N0 is not None:
        keep = x >= N0
        x, y = x[keep], y[keep]
    return loglinear_fit(x, y, floor=floor)


# ---------------------------------------------------------------------------
# stopping times and tails
# ---------------------------------------------------------------------------

def tempered_stopping(xs, mode: str = "first_failure", *, lam: float, eps: float,
                      C: float = 0.0, N: int = 1, C0: float = 0.0) -> int:
    """Stopping times along a sequence; NEVER encodes infinity.

    first_failure: least n with x_1..x_n not (C, lam, eps)-tempered.
    reverse_return: least T >= N with x_1..x_T reverse tempered at level C0.
    """
    xs = np.asarray(xs, dtype=float)
    if mode == "first_failure":
        if len(xs) == 0:
            return NEVER
        _, _, _, vals = _scan_terms(_prefix(xs), lam, eps)
        bad = np.nonzero(np.minimum.accumulate(vals) < C)[0]
        return int(bad[0]) + 1 if len(bad) else NEVER
    if mode == "reverse_return":
        for T in range(max(int(N), 1), len(xs) + 1):
            if tempered_constant(xs[:T], lam, eps, "reverse") >= C0:
                return T
        return NEVER
    raise ValidationError(f"unknown stopping mode {mode!r}")


def reverse_tempered_series(xs, lam: float, eps: float) -> np.ndarray:
    """Reverse tempered constant of every prefix x_1..x_T, T = 1..n."""
    xs = np.asarray(xs, dtype=float)
    return np.array([tempered_constant(xs[:T], lam, eps, "reverse")
                     for T in range(1, len(xs) + 1)])


def azuma_bound(c, lam: float) -> float:
    """min(1, 2 exp(-lam^2 / (2 sum c_i^2)))."""
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise ValidationError("Azuma increments must be positive")
    val = 2.0 * math.exp(-lam * lam / (2.0 * float(np.sum(c * c))))
    return min(1.0, val)


# ---------------------------------------------------------------------------
# stable direction statistics
# ---------------------------------------------------------------------------

@dataclass
class DirectionHistogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    thetas: np.ndarray
    n: int
    eps_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hmax: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_fit: LineFit | None = None
    degenerate_fraction: float = 0.0

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def alpha(self) -> float:
        return self.alpha_fit.slope if self.alpha_fit is not None else float("nan")

    def probabilities(self) -> np.ndarray:
        return self.counts / max(self.total, 1)


def direction_histogram(thetas, bins: int = 256):
    thetas = np.mod(np.asarray(thetas, dtype=float), math.pi)
    edges = np.linspace(0.0, math.pi, bins + 1)
    idx = np.minimum((thetas / (math.pi / bins)).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return edges, counts


def mass_profile(thetas, eps_grid) -> np.ndarray:
    """h(eps) = max over arcs of length 2 eps of the empirical mass, on [0, pi)."""
    t = np.sort(np.mod(np.asarray(thetas, dtype=float), math.pi))
    W = len(t)
    ext = np.concatenate([t, t + math.pi])
    out = []
    for e in eps_grid:
        right = np.searchsorted(ext, t + 2.0 * e, side="right")
        out.append(float(np.max(right - np.arange(W))) / W)
    return np.minimum(np.array(out), 1.0)


DEFAULT_EPS_GRID = 2.0 ** -np.arange(3, 11)


def stable_direction_distribution(tup: MapTuple, x, n: int, W: int, seed: int = 0,
                                  stream0: int = 0, bins: int = 256,
                                  eps_grid=DEFAULT_EPS_GRID,
                                  max_widen: int = 6) -> DirectionHistogram:
    """Histogram of theta_s(Df^n_w(x)) over W sampled words.

    Word w uses stream ``stream0 + w``.  n is doubled until ||Df^n|| >= 2 on
    at least 99% of words.
    """
    x = np.asarray(x, dtype=float)
    syms_all = None
    for _ in range(max_widen + 1):
        syms_all = np.stack([word_stream(seed, stream0 + w, tup.m).symbols(n) for w in range(W)])
        _, jacs = orbit_words(tup, syms_all, np.broadcast_to(x, (W, 2)))
        prods, ls = running_products(jacs)
        tu, lsig = _right_split(prods[-1])
        lsig = lsig + ls[-1]
        if np.mean(lsig >= math.log(2.0)) >= 0.99:
            break
        n *= 2
    deg = lsig <= DEGENERATE_TOL
    frac = float(np.mean(deg))
    if frac > 0.05:
        raise ValidationError(f"degenerate products on {frac:.1%} of words")
    ts = np.where(deg, math.pi / 2, np.mod(tu + math.pi / 2, math.pi))
    edges, counts = direction_histogram(ts, bins)
    eps_grid = np.asarray(eps_grid, dtype=float)
    h = mass_profile(ts, eps_grid)
    fit = loglog_fit(eps_grid, h, floor=0.0)
    return DirectionHistogram(edges, counts, int(W), ts, int(n), eps_grid, h, fit, frac)


def histogram_tv(h1: DirectionHistogram, h2: DirectionHistogram) -> float:
    return 0.5 * float(np.abs(h1.probabilities() - h2.probabilities()).sum())


def bootstrap_tv_null(thetas, bins: int = 256, reps: int = 200, seed: int = 0):
    """(mean, std) of the TV distance between two bootstrap histograms of one sample.

    TV between independent finite samples is biased upward, so a two-sample
    comparison should be read against mean + k std, not std alone.
    """
    rng = np.random.default_rng(seed)
    t = np.asarray(thetas)
    W = len(t)
    tvs = []
    for _ in range(reps):
        a = direction_histogram(rng.choice(t, W), bins)[1] / W
        b = direction_histogram(rng.choice(t, W), bins)[1] / W
        tvs.append(0.5 * np.abs(a - b).sum())
    return float(np.mean(tvs)), float(np.std(tvs))


def bootstrap_tv_sigma(thetas, bins: int = 256, reps: int = 200, seed: int = 0) -> float:
    return bootstrap_tv_null(thetas, bins, reps, seed)[1]
