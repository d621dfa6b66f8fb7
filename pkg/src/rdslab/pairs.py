"""Standard pairs (curve + log-density) and weighted families of them.

Curves are polylines in lifted (unwrapped) coordinates, shifted by integer
vectors whenever convenient; a pair's measure is  int psi(gamma(s)) rho(s) ds
with the trapezoid rule in polyline arc length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .cocycle import NEVER, scan_min_batch, split_trajectories
from .fitting import LineFit, loglinear_fit
from .rds_core import (MapTuple, ValidationError, angle_dist, as_symbols, matvec, orbit,
                       orbit_words, word_stream)

DEFAULT_ALPHA = 0.5


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass
class StandardPair:
    nodes: np.ndarray
    logrho: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.logrho = np.asarray(self.logrho, dtype=float)
        if self.nodes.ndim != 2 or len(self.nodes) < 2:
            raise ValidationError("a standard pair needs at least 2 nodes")
        if len(self.logrho) != len(self.nodes):
            raise ValidationError("logrho must have one sample per node")

    @property
    def K(self) -> int:
        return len(self.nodes)

    @property
    def seg(self) -> np.ndarray:
        return np.hypot(*np.diff(self.nodes, axis=0).T)

    @property
    def s(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.seg)])

    @property
    def length(self) -> float:
        return float(np.sum(self.seg))

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.logrho)

    @property
    def mass(self) -> float:
        r = self.rho
        return float(np.sum(0.5 * (r[1:] + r[:-1]) * self.seg))

    def wrapped(self) -> np.ndarray:
        return np.mod(self.nodes, 1.0)

    def recentered(self) -> "StandardPair":
        shift = np.floor(self.nodes[0])
        return StandardPair(self.nodes - shift, self.logrho)

    def scaled(self, factor: float) -> "StandardPair":
        return StandardPair(self.nodes.copy(), self.logrho + math.log(factor))

    def integrate(self, fn) -> complex:
        v = fn(self.wrapped()) * self.rho
        return np.sum(0.5 * (v[1:] + v[:-1]) * self.seg)

    def tangents(self) -> np.ndarray:
        """Unit tangents at nodes from a cubic spline in arc length."""
        s = self.s
        if self.K < 3:
            d = np.broadcast_to(self.nodes[1] - self.nodes[0], self.nodes.shape)
        else:
            d = CubicSpline(s, self.nodes, axis=0)(s, 1)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def point_at(self, t):
        """Point and log-density at arc-length t (piecewise linear)."""
        s = self.s
        return (np.stack([np.interp(t, s, self.nodes[:, 0]), np.interp(t, s, self.nodes[:, 1])], -1),
                np.log(np.interp(t, s, self.rho)))


def segment_pair(p0, p1, mesh: float, logrho=None) -> StandardPair:
    """Straight pair from p0 to p1 with node spacing <= mesh."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    L = float(np.hypot(*(p1 - p0)))
    K = max(2, int(math.ceil(L / mesh)) + 1)
    t = np.linspace(0.0, 1.0, K)
    nodes = p0 + t[:, None] * (p1 - p0)
    lr = np.zeros(K) if logrho is None else np.asarray(logrho(t * L), dtype=float)
    return StandardPair(nodes, lr)


def arc_pair(center, radius: float, t0: float, t1: float, mesh: float) -> StandardPair:
    K = max(3, int(math.ceil(radius * abs(t1 - t0) / mesh)) + 1)
    t = np.linspace(t0, t1, K)
    nodes = np.asarray(center, dtype=float) + radius * np.stack([np.cos(t), np.sin(t)], -1)
    return StandardPair(nodes, np.zeros(K))


# ---------------------------------------------------------------------------
# goodness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Goodness:
    R: float
    binding: str
    alpha: float
    length: float
    curvature: float
    holder: float


def curvatures(nodes) -> np.ndarray:
    """Three-point circumradius curvature 4 area / (a b c) at interior nodes."""
    P = np.asarray(nodes, dtype=float)
    if len(P) < 3:
        raise ValidationError("curvature needs at least 3 nodes")
    a = P[1:-1] - P[:-2]
    b = P[2:] - P[1:-1]
    c = P[2:] - P[:-2]
    cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    den = np.hypot(*a.T) * np.hypot(*b.T) * np.hypot(*c.T)
    return np.where(den > 0, 2.0 * cross / np.where(den > 0, den, 1.0), 0.0)


def holder_constant(s, values, alpha: float, reach: float = 1.0, block: int = 2048) -> float:
    """max |dv| / ds^alpha over node pairs with 0 < ds <= reach."""
    s = np.asarray(s, dtype=float)
    v = np.asarray(values, dtype=float)
    best = 0.0
    for i0 in range(0, len(s), block):
        ds = np.abs(s[i0:i0 + block, None] - s[None, :])
        dv = np.abs(v[i0:i0 + block, None] - v[None, :])
        ok = (ds > 0) & (ds <= reach)
        if np.any(ok):
            best = max(best, float(np.max(dv[ok] / ds[ok] ** alpha)))
    return best


def goodness(pair: StandardPair, alpha: float = DEFAULT_ALPHA) -> Goodness:
    """Smallest R with length >= e^-R, curvature <= e^R, Holder(ln rho) <= e^R.

    Each term is clamped below at 0; ties bind in the order length,
    curvature, holder.
    """
    L = pair.length
    kap = float(np.max(curvatures(pair.nodes)))
    hol = holder_constant(pair.s, pair.logrho, alpha)
    terms = [
        ("length", max(0.0, -math.log(L)) if L > 0 else math.inf),
        ("curvature", max(0.0, math.log(kap)) if kap > 0 else 0.0),
        ("holder", max(0.0, math.log(hol)) if hol > 0 else 0.0),
    ]
    R = max(t[1] for t in terms)
    binding = next(name for name, v in terms if v == R)
    return Goodness(R, binding, alpha, L, kap, hol)


# ---------------------------------------------------------------------------
# subdivision and resampling
# ---------------------------------------------------------------------------

def _insert_cuts(pair: StandardPair, cuts):
    """Insert nodes at arc-length cuts; rho (not log rho) is interpolated linearly."""
    s = pair.s
    cuts = np.sort(np.asarray(cuts, dtype=float))
    # snap cuts that land on a node
    j = np.clip(np.searchsorted(s, cuts), 1, len(s) - 1)
    near = np.where(cuts - s[j - 1] < s[j] - cuts, j - 1, j)
    snap = np.abs(s[near] - cuts) <= 1e-10 * s[-1]
    cuts = np.where(snap, s[near], cuts)
    new_s = np.union1d(s, cuts)
    nodes = np.stack([np.interp(new_s, s, pair.nodes[:, 0]), np.interp(new_s, s, pair.nodes[:, 1])], -1)
    rho = np.interp(new_s, s, pair.rho)
    # keep original nodes bit-exact
    idx = np.searchsorted(new_s, s)
    nodes[idx] = pair.nodes
    lr = np.log(rho)
    lr[idx] = pair.logrho
    return new_s, nodes, lr


def subdivide(pair: StandardPair, cuts=None, fractions=None) -> "StandardFamily":
    """Cut a pair at arc-length positions, or split it vertically by fractions."""
    if (cuts is None) == (fractions is None):
        raise ValidationError("give exactly one of cuts or fractions")
    if fractions is not None:
        fr = np.asarray(fractions, dtype=float)
        if np.any(fr <= 0) or np.any(fr > 1) or abs(fr.sum() - 1.0) > 1e-12:
            raise ValidationError("fractions must lie in (0, 1) and sum to 1")
        return StandardFamily([pair.scaled(float(f)) for f in fr])
    cuts = np.asarray(cuts, dtype=float)
    L = pair.length
    if np.any(cuts <= 0) or np.any(cuts >= L):
        raise ValidationError("cuts must lie strictly inside the pair")
    new_s, nodes, lr = _insert_cuts(pair, cuts)
    j = np.clip(np.searchsorted(pair.s, cuts), 1, pair.K - 1)
    s0 = pair.s
    cuts = np.where(np.abs(s0[j] - cuts) <= 1e-10 * L, s0[j],
                    np.where(np.abs(s0[j - 1] - cuts) <= 1e-10 * L, s0[j - 1], cuts))
    bounds = np.unique(np.concatenate([[0], np.searchsorted(new_s, np.sort(cuts)), [len(new_s) - 1]]))
    pieces = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        pieces.append(StandardPair(nodes[a:b + 1].copy(), lr[a:b + 1].copy()))
    return StandardFamily(pieces)


def restrict(pair: StandardPair, t0: float, t1: float) -> StandardPair:
    """Sub-pair over arc length [t0, t1]."""
    L = pair.length
    t0, t1 = max(0.0, t0), min(L, t1)
    if not t1 > t0:
        raise ValidationError("empty restriction")
    cuts = [c for c in (t0, t1) if 0 < c < L]
    new_s, nodes, lr = _insert_cuts(pair, cuts) if cuts else (pair.s, pair.nodes, pair.logrho)
    a = int(np.searchsorted(new_s, t0))
    b = int(np.searchsorted(new_s, t1))
    return StandardPair(nodes[a:b + 1].copy(), lr[a:b + 1].copy())


def resample(pair: StandardPair, mesh: float) -> StandardPair:
    """Uniform arc-length resampling with spacing <= mesh."""
    s = pair.s
    K = max(2, int(math.ceil(s[-1] / mesh)) + 1)
    t = np.linspace(0.0, s[-1], K)
    if pair.K >= 4:
        nodes = CubicSpline(s, pair.nodes, axis=0)(t)
    else:
        nodes = np.stack([np.interp(t, s, pair.nodes[:, 0]), np.interp(t, s, pair.nodes[:, 1])], -1)
    nodes[0], nodes[-1] = pair.nodes[0], pair.nodes[-1]
    return StandardPair(nodes, np.interp(t, s, pair.logrho))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass
class StandardFamily:
    pairs: list
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(len(self.pairs))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.pairs):
            raise ValidationError("one weight per pair")
        if np.any(self.weights <= 0):
            raise ValidationError("weights must be positive")

    def __len__(self):
        return len(self.pairs)

    @property
    def masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.pairs])

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights * self.masses)) if self.pairs else 0.0

    def integrate(self, fn) -> complex:
        return sum(w * p.integrate(fn) for w, p in zip(self.weights, self.pairs))

    def goodness(self, alpha: float = DEFAULT_ALPHA) -> list:
        return [goodness(p, alpha) for p in self.pairs]

    def extend(self, other: "StandardFamily", weight: float = 1.0):
        self.pairs.extend(other.pairs)
        self.weights = np.concatenate([self.weights, weight * other.weights])


def volume_family(N: int, mesh: float | None = None) -> StandardFamily:
    """N horizontal unit segments y = (k + 1/2)/N with weight 1/N."""
    if N < 1:
        raise ValidationError("volume family needs N >= 1")
    mesh = 1.0 / (4 * N) if mesh is None else mesh
    pairs = [segment_pair([0.0, (k + 0.5) / N], [1.0, (k + 0.5) / N], mesh) for k in range(N)]
    return StandardFamily(pairs, np.full(N, 1.0 / N))


# ---------------------------------------------------------------------------
# pushforward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PushParams:
    mesh: float = 2e-3
    ell_max: float = 0.5
    max_refine: int = 40
    fold_angle: float = math.pi / 2


def _turning(nodes):
    d = np.diff(nodes, axis=0)
    a = np.arctan2(d[:, 1], d[:, 0])
    t = np.abs(np.mod(a[1:] - a[:-1] + math.pi, 2 * math.pi) - math.pi)
    return t


def push_step(f, pair: StandardPair, pp: PushParams = PushParams()) -> list:
    """Image of one pair under one map: list of pieces with the same total mass."""
    keep = np.concatenate([[True], pair.seg > 0])
    P, L = pair.nodes[keep], pair.logrho[keep]
    m0 = pair.mass
    for _ in range(pp.max_refine):
        Q = f.apply(P, wrap=False)
        d = np.hypot(*np.diff(Q, axis=0).T)
        bad = d > pp.mesh
        if not np.any(bad):
            break
        s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(P, axis=0).T))])
        mids = 0.5 * (s[:-1] + s[1:])[bad]
        new_s = np.sort(np.concatenate([s, mids]))
        if len(s) >= 4:
            P2 = CubicSpline(s, P, axis=0)(new_s)
        else:
            P2 = np.stack([np.interp(new_s, s, P[:, 0]), np.interp(new_s, s, P[:, 1])], -1)
        keep = np.searchsorted(new_s, s)
        P2[keep] = P
        L = np.interp(new_s, s, L)
        P = P2
    tmp = StandardPair(P, L)
    tau = tmp.tangents()
    J = f.jac(np.mod(P, 1.0))
    stretch = np.hypot(*matvec(J, tau).T)
    Q = f.apply(P, wrap=False)
    img = StandardPair(Q, L - np.log(stretch))
    # quadrature correction: conserve the mass of this pair
    m1 = img.mass
    if m1 > 0 and m0 > 0:
        img = StandardPair(img.nodes, img.logrho + math.log(m0 / m1))
    pieces = _split_pair(img, pp)
    return [p.recentered() for p in pieces]


def _split_pair(pair: StandardPair, pp: PushParams) -> list:
    cuts_idx = []
    if pair.K >= 3:
        t = _turning(pair.nodes)
        cuts_idx = list(np.nonzero(t > pp.fold_angle)[0] + 1)
    out = []
    bounds = sorted(set([0] + cuts_idx + [pair.K - 1]))
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b > a:
            out.append(StandardPair(pair.nodes[a:b + 1], pair.logrho[a:b + 1]))
    final = []
    for p in out:
        L = p.length
        if L > pp.ell_max:
            k = int(math.ceil(L / pp.ell_max))
            cuts = L * np.arange(1, k) / k
            final.extend(subdivide(p, cuts=cuts).pairs)
        else:
            final.append(p)
    return final


def push_pair(tup: MapTuple, word, n: int, pair: StandardPair,
              pp: PushParams = PushParams(), start: int = 0) -> StandardFamily:
    """Push a pair through symbols start..start+n-1 of the word, one map at a time."""
    syms = as_symbols(word, start + n, tup.m)[start:]
    pieces = [pair]
    for s in syms:
        f = tup.maps[s]
        nxt = []
        for p in pieces:
            nxt.extend(push_step(f, p, pp))
        pieces = nxt
    return StandardFamily(pieces)


def push_family(tup: MapTuple, word, n: int, fam: StandardFamily,
                pp: PushParams = PushParams(), start: int = 0) -> StandardFamily:
    out = StandardFamily([], np.zeros(0))
    for w, p in zip(fam.weights, fam.pairs):
        out.extend(push_pair(tup, word, n, p, pp, start), w)
    return out


def density_holder_bound(f_c2: float, mDf: float, old_holder: float, curv: float,
                         alpha: float = DEFAULT_ALPHA, C: float = 1.0) -> float:
    """(1/m(Df))^(1+alpha) (old + C ||f||_C2 (1 + ||gamma||_C2))."""
    return (1.0 / mDf) ** (1.0 + alpha) * (old_holder + C * f_c2 * (1.0 + curv))


# ---------------------------------------------------------------------------
# backwards good times
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoodTimeParams:
    C: float = 4.0
    lam: float = 0.3
    eps: float = 0.02
    A: float = 2.0
    eps_prime: float = 0.05
    R: float = 0.0

    @property
    def n_min(self) -> int:
        return int(math.ceil(self.A * max(self.R, 1.0)))


def reverse_split_constant(tr, n: int, lam: float, eps: float) -> np.ndarray:
    """Smallest C for which a prefix of length n has a reverse tempered splitting.

    tr holds split trajectories of that prefix.  The inverse sequence uses
    the same singular pair: its expanded vector is A^n s_n and its
    contracted vector A^n u_n.  Vectorized over trailing batch axes.
    """
    j = np.arange(n + 1)
    LuB = tr.Ls[n - j] - tr.Ls[n]
    LsB = tr.Lu[n - j] - tr.Lu[n]
    angB = tr.angle[n - j]
    jj = j.reshape((-1,) + (1,) * (angB.ndim - 1)).astype(float)
    with np.errstate(divide="ignore"):
        r3 = np.max(-np.log(angB) - eps * jj, axis=0)
    return np.maximum(np.maximum(-scan_min_batch(LuB, lam, eps), -scan_min_batch(-LsB, lam, eps)), r3)


def backwards_good_times(tup: MapTuple, symbols, X, tangents, gp: GoodTimeParams,
                         horizon: int) -> np.ndarray:
    """First backwards good time for each (word row, point, tangent angle).

    symbols: (W, horizon); X: (W, 2); tangents: (W,) angles of gamma'(x).
    Returns int array with NEVER where the horizon is exhausted.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    W = len(symbols)
    X = np.asarray(X, dtype=float)
    _, jacs = orbit_words(tup, symbols[:, :horizon], X)
    T = np.full(W, NEVER, dtype=np.int64)
    active = np.ones(W, dtype=bool)
    for n in range(max(gp.n_min, 1), horizon + 1):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        tr = split_trajectories(jacs[:n, idx])
        req = reverse_split_constant(tr, n, gp.lam, gp.eps)
        i = n - gp.n_min
        ang = angle_dist(tr.theta_s, np.asarray(tangents)[idx])
        ok = (req <= gp.C) & ~tr.degenerate & (ang >= math.exp(-gp.eps_prime * i))
        T[idx[ok]] = n
        active[idx[ok]] = False
    return T


def backwards_good_time(tup: MapTuple, word, x, tangent: float, gp: GoodTimeParams,
                        horizon: int = 200) -> int:
    syms = as_symbols(word, horizon, tup.m)
    return int(backwards_good_times(tup, syms[None], np.asarray(x, float)[None],
                                    np.array([tangent]), gp, horizon)[0])


@dataclass
class RecoveryResult:
    T: np.ndarray
    R_at_T: np.ndarray
    x_index: np.ndarray
    streams: np.ndarray
    tail_fit: LineFit
    n_min: int


def _local_jet(pair: StandardPair, t: float):
    """Spline position, first and second derivative, and log rho slope at t."""
    s = pair.s
    if pair.K >= 4:
        cs = CubicSpline(s, pair.nodes, axis=0)
        g, d1, d2 = cs(t), cs(t, 1), cs(t, 2)
    else:
        g = pair.point_at(t)[0]
        d1 = (pair.nodes[-1] - pair.nodes[0]) / s[-1]
        d2 = np.zeros(2)
    j = int(np.clip(np.searchsorted(s, t), 1, pair.K - 1))
    slope = (pair.logrho[j] - pair.logrho[j - 1]) / (s[j] - s[j - 1])
    return g, d1, d2, float(np.interp(t, s, pair.logrho)), slope


def recovered_goodness(tup: MapTuple, word, pair: StandardPair, t: float, T: int,
                       target: float = 0.25, mesh: float = 2e-3,
                       alpha: float = DEFAULT_ALPHA) -> float:
    """Goodness of an image neighborhood of f^T(gamma(t)) of length about ``target``.

    The source neighborhood is gamma near t with half-length
    target / (2 |Df^T gamma'(t)|), usually far below float resolution, so it
    is carried as exact offsets from the orbit of x and its second-order jet.
    """
    syms = as_symbols(word, T, tup.m)
    g, d1, d2, lr0, lr1 = _local_jet(pair, t)
    x0 = np.mod(g, 1.0)
    pts, jacs = orbit(tup, syms, x0)
    w = d1 / np.hypot(*d1)
    logstretch = 0.0
    for J in jacs:
        w = J @ w
        r = float(np.hypot(*w))
        logstretch += math.log(r)
        w = w / r
    half = 0.5 * target * math.exp(-logstretch)
    K = max(5, int(math.ceil(target / mesh)) + 1)
    u = np.linspace(-half, half, K)
    Z = u[:, None] * d1 + 0.5 * u[:, None] ** 2 * d2
    tau0 = d1 + u[:, None] * d2
    tau = tau0
    for k, s in enumerate(syms):
        f = tup.maps[s]
        P = pts[k]
        tau = matvec(f.jac(np.mod(P + Z, 1.0)), tau)
        Z = f.offset(np.broadcast_to(P, Z.shape), Z)
    # rho transported by the arc-length Jacobian |Df^T tau| / |tau|
    lr = lr0 + lr1 * u - np.log(np.hypot(*tau.T)) + np.log(np.hypot(*tau0.T))
    img = StandardPair(pts[-1] + Z, lr)
    return goodness(img, alpha).R


def recovery_experiment(tup: MapTuple, pair: StandardPair, W: int, gp: GoodTimeParams,
                        horizon: int = 120, seed: int = 0, stream0: int = 0,
                        n_points: int = 1, with_goodness: int = 0,
                        pp: PushParams = PushParams()) -> RecoveryResult:
    """Backwards good times for W words at random points of a pair.

    Word w uses stream stream0 + w; its points are drawn by a generator
    seeded from (seed, stream).  The first ``with_goodness`` samples also get
    the goodness of their recovered image neighborhood.
    """
    streams = np.arange(stream0, stream0 + W)
    syms = np.stack([word_stream(seed, int(s), tup.m).symbols(horizon) for s in streams])
    rng = np.random.default_rng([seed, stream0, W])
    ts = rng.uniform(0.05, 0.95, size=(W, n_points)) * pair.length
    xi = np.searchsorted(pair.s, ts[:, 0])
    X, _ = pair.point_at(ts[:, 0])
    tang = pair.tangents()
    tt = np.array([np.interp(t, pair.s, np.unwrap(np.arctan2(tang[:, 1], tang[:, 0]))) for t in ts[:, 0]])
    T = backwards_good_times(tup, syms, np.mod(X, 1.0), tt, gp, horizon)
    R = np.full(W, np.nan)
    for w in range(min(with_goodness, W)):
        if T[w] != NEVER:
            R[w] = recovered_goodness(tup, syms[w], pair, ts[w, 0], int(T[w]), mesh=pp.mesh)
    fit = tail_fit(T, gp.n_min)
    return RecoveryResult(T, R, xi, streams, fit, gp.n_min)


def tail_fit(T, n0: int = 0, floor_count: int = 5) -> LineFit:
    """Fit ln P(T > n0 + i) against i, using levels with enough exceedances."""
    T = np.asarray(T)
    W = len(T)
    finite = T[T != NEVER]
    if len(finite) == 0:
        return LineFit(float("nan"), float("nan"), 0.0, 0)
    i = np.arange(0, int(finite.max()) - n0 + 1)
    surv = np.array([(T > n0 + k).sum() for k in i])
    keep = surv >= floor_count
    return loglinear_fit(i[keep], surv[keep] / W, floor=0.0)
