"""Finite-time Pesin theory: Lyapunov metrics, graph transforms, fake stable
leaves and their holonomies.

Leaves are built in offset coordinates: a base orbit is stored once and
nearby points are tracked as small displacements propagated by the
cancellation-free ``offset``/``inv_offset`` of each map.  This keeps leaves
accurate after Df^n has grown far beyond 1/machine-epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .cocycle import SplittingCertificate, _right_split, split_trajectories
from .rds_core import (
    MapTuple,
    ValidationError,
    angle_dist,
    as_symbols,
    matvec,
    norm2,
    orbit,
    unit,
)


# ---------------------------------------------------------------------------
# Lyapunov metrics
# ---------------------------------------------------------------------------

@dataclass
class LyapMetricSeq:
    """Adapted norms along a finite cocycle with a tempered splitting.

    At time i the frame (es[i], eu[i]) is declared orthogonal and
    ||a es + b eu||' = sqrt(a^2 ns^2 + b^2 nu^2).
    """

    factors: np.ndarray
    es: np.ndarray
    eu: np.ndarray
    ns: np.ndarray
    nu: np.ndarray
    lambda_prime: float
    C: float
    lam: float
    eps: float

    @property
    def n(self) -> int:
        return len(self.factors)

    def gram(self, i: int) -> np.ndarray:
        F = np.column_stack([self.es[i], self.eu[i]])
        Fi = np.linalg.inv(F)
        return Fi.T @ np.diag([self.ns[i] ** 2, self.nu[i] ** 2]) @ Fi

    def norm(self, i: int, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        Q = self.gram(i)
        return np.sqrt(np.einsum("...i,ij,...j->...", xi, Q, xi))

    def inner(self, i: int, v, w) -> np.ndarray:
        return np.einsum("...i,ij,...j->...", v, self.gram(i), w)

    def comparison(self, i: int) -> tuple:
        """(min, max) of ||xi||' / ||xi|| at time i."""
        ev = np.linalg.eigvalsh(self.gram(i))
        return float(math.sqrt(max(ev[0], 0.0))), float(math.sqrt(ev[1]))

    def upper_constant(self, i: int) -> float:
        gap = 1.0 - math.exp(2.0 * (self.lambda_prime - self.lam))
        if gap <= 0:
            return math.inf
        return 4.0 * math.exp(2.0 * self.C + 2.0 * self.eps * i) / math.sqrt(gap)

    def step_ratios(self) -> tuple:
        """Per-step stretch of es and eu in the adapted norms."""
        rs = np.hypot(*matvec(self.factors, self.es[:-1]).T)
        ru = np.hypot(*matvec(self.factors, self.eu[:-1]).T)
        s = rs * self.ns[1:] / self.ns[:-1]
        u = ru * self.nu[1:] / self.nu[:-1]
        return s, u

    def violations(self, rtol: float = 1e-12) -> dict:
        s, u = self.step_ratios()
        lo = math.exp(-self.lambda_prime)
        hi = math.exp(self.lambda_prime)
        cmp_lo = cmp_hi = 0
        for i in range(self.n + 1):
            a, b = self.comparison(i)
            cmp_lo += a < (1.0 / math.sqrt(2.0)) * (1 - rtol)
            cmp_hi += b > self.upper_constant(i) * (1 + rtol)
        return {
            "stable_step": int(np.sum(s > lo * (1 + rtol))),
            "unstable_step": int(np.sum(u < hi * (1 - rtol))),
            "comparison_lower": int(cmp_lo),
            "comparison_upper": int(cmp_hi),
        }


def lyapunov_metric(mats, cert: SplittingCertificate, lambda_prime: float) -> LyapMetricSeq:
    """Evaluate both defining sums of the adapted norms on the finite horizon.

    Stable:   ||es_i||'^2 = sum_{l=0}^{n-i} ||A^l_i es_i||^2 e^{2 lam' l}
    Unstable: ||eu_i||'^2 = sum_{l=0}^{i} e^{2 lam' l} ||(A^l_{i-l})^{-1} eu_i||^2
    """
    p = cert.params
    if not 0 < lambda_prime <= p.lam:
        raise ValidationError(f"need 0 < lambda' <= lambda = {p.lam}, got {lambda_prime}")
    mats = np.asarray(mats, dtype=float)
    tr = split_trajectories(mats)
    n = len(mats)
    lp = float(lambda_prime)
    i = np.arange(n + 1)[:, None]
    l = np.arange(n + 1)[None, :]
    with np.errstate(invalid="ignore"):
        ks = np.minimum(i + l, n)
        ts = 2.0 * (tr.Ls[ks] - tr.Ls[i]) + 2.0 * lp * l
        ts = np.where(i + l <= n, ts, -np.inf)
        ku = np.maximum(i - l, 0)
        tu = 2.0 * lp * l - 2.0 * (tr.Lu[i] - tr.Lu[ku])
        tu = np.where(l <= i, tu, -np.inf)
    ns = np.exp(0.5 * logsumexp(ts, axis=1))
    nu = np.exp(0.5 * logsumexp(tu, axis=1))
    return LyapMetricSeq(mats, tr.dir_s, tr.dir_u, ns, nu, lp, p.C, p.lam, p.eps)


def metric_angle(Q, v, w) -> np.ndarray:
    """Angle between v and w in the inner product with Gram matrix Q."""
    vw = np.einsum("...i,ij,...j->...", v, Q, w)
    vv = np.einsum("...i,ij,...j->...", v, Q, v)
    ww = np.einsum("...i,ij,...j->...", w, Q, w)
    c = np.clip(vw / np.sqrt(vv * ww), -1.0, 1.0)
    return np.arccos(c)


def linear_curvature_bound(L) -> float:
    """||L|| / m(L)^2, the curvature gain of a linear map on curves."""
    L = np.asarray(L, dtype=float)
    s = np.linalg.svd(L, compute_uv=False)
    return float(s[0] / s[-1] ** 2)


# ---------------------------------------------------------------------------
# local maps and curve charts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrigField:
    """f(z) = sum a (sin(k . z + p) - sin p); vanishes at the origin."""

    terms: tuple = ()  # (kx, ky, a, p)

    def _parts(self, x, y):
        for kx, ky, a, p in self.terms:
            yield kx, ky, a, p, kx * x + ky * y + p

    def value(self, x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for kx, ky, a, p, w in self._parts(x, y):
            out = out + a * (np.sin(w) - math.sin(p))
        return out

    def grad(self, x, y):
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for kx, ky, a, p, w in self._parts(x, y):
            c = a * np.cos(w)
            gx = gx + kx * c
            gy = gy + ky * c
        return gx, gy

    def c0(self, radius: float) -> float:
        return float(sum(abs(a) * min(2.0, math.hypot(kx, ky) * radius)
                         for kx, ky, a, _ in self.terms))

    def c1(self) -> float:
        return float(sum(abs(a) * math.hypot(kx, ky) for kx, ky, a, _ in self.terms))

    def c2(self) -> float:
        return float(sum(abs(a) * (kx * kx + ky * ky) for kx, ky, a, _ in self.terms))


@dataclass(frozen=True)
class LocalMap:
    """F(x, y) = (s1 x + f1(x, y), s2 y + f2(x, y))."""

    sigma1: float
    sigma2: float
    f1: TrigField = TrigField()
    f2: TrigField = TrigField()

    @property
    def lam(self) -> float:
        return min(self.sigma1, 1.0 / self.sigma2)

    def apply(self, x, y):
        return (self.sigma1 * x + self.f1.value(x, y),
                self.sigma2 * y + self.f2.value(x, y))

    def jac(self, x, y):
        a, b = self.f1.grad(x, y)
        c, d = self.f2.grad(x, y)
        J = np.empty(np.broadcast(x, y).shape + (2, 2))
        J[..., 0, 0] = self.sigma1 + a
        J[..., 0, 1] = b
        J[..., 1, 0] = c
        J[..., 1, 1] = self.sigma2 + d
        return J

    def eps1(self, radius: float) -> float:
        return max(self.f1.c0(radius), self.f1.c1())

    def eps2(self, radius: float) -> float:
        return max(self.f2.c0(radius), self.f2.c1())

    def f_c2(self) -> float:
        return max(self.f1.c2(), self.f2.c2())


@dataclass(frozen=True)
class ComposedLocalMap:
    """second o first; norm bounds of the perturbation are not tracked."""

    first: object
    second: object

    @property
    def sigma1(self) -> float:
        return self.first.sigma1 * self.second.sigma1

    @property
    def sigma2(self) -> float:
        return self.first.sigma2 * self.second.sigma2

    @property
    def lam(self) -> float:
        return min(self.sigma1, 1.0 / self.sigma2)

    def apply(self, x, y):
        return self.second.apply(*self.first.apply(x, y))

    def jac(self, x, y):
        X, Y = self.first.apply(x, y)
        return self.second.jac(X, Y) @ self.first.jac(x, y)


@dataclass
class CurveChart:
    """Graph {origin + x e1 + phi(x) e2} with a log-density along it.

    ``frame`` holds e1, e2 as columns.  ``logrho`` is the log of a density
    with respect to arc length.
    """

    x: np.ndarray
    phi: np.ndarray
    logrho: np.ndarray | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    frame: np.ndarray = field(default_factory=lambda: np.eye(2))
    report: list | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.logrho is None:
            self.logrho = np.zeros_like(self.x)
        self.logrho = np.asarray(self.logrho, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        self.frame = np.asarray(self.frame, dtype=float)
        if np.any(np.diff(self.x) <= 0):
            raise ValidationError("chart mesh must be increasing")
        if not np.all(np.isfinite(self.phi)):
            raise ValidationError("chart graph must be finite")

    @classmethod
    def from_function(cls, phi, a: float, b: float, K: int = 201, logrho=None, **kw):
        x = np.linspace(a, b, K)
        lr = None if logrho is None else logrho(x)
        return cls(x, phi(x), lr, **kw)

    @classmethod
    def segment(cls, center, theta: float, half: float, K: int = 201):
        """Straight transversal through ``center`` in direction theta."""
        e1 = unit(theta)
        e2 = np.array([-e1[1], e1[0]])
        return cls(np.linspace(-half, half, K), np.zeros(K), None, np.asarray(center, float),
                   np.column_stack([e1, e2]))

    # norms on the mesh
    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    def c0(self) -> float:
        return float(np.max(np.abs(self.phi)))

    def c1(self) -> float:
        return float(np.max(np.abs(np.gradient(self.phi, self.x, edge_order=2))))

    def c2(self) -> float:
        if len(self.x) < 3:
            return 0.0
        h = np.diff(self.x)
        d2 = 2.0 * ((self.phi[2:] - self.phi[1:-1]) / h[1:] - (self.phi[1:-1] - self.phi[:-2]) / h[:-1]) \
            / (h[1:] + h[:-1])
        return float(np.max(np.abs(d2)))

    def holder(self, alpha: float, values=None, reach: float = 1.0) -> float:
        """Holder seminorm over pairs of graph parameters within ``reach``."""
        v = self.logrho if values is None else values
        dx = np.abs(self.x[:, None] - self.x[None, :])
        dv = np.abs(v[:, None] - v[None, :])
        ok = (dx > 0) & (dx <= reach)
        if not np.any(ok):
            return 0.0
        return float(np.max(dv[ok] / dx[ok] ** alpha))

    # geometry
    def _spline(self):
        return CubicSpline(self.x, self.phi)

    def local_point(self, u):
        u = np.asarray(u, dtype=float)
        return np.stack([u, self._spline()(u)], axis=-1)

    def point(self, u):
        return self.origin + self.local_point(u) @ self.frame.T

    def tangent(self, u):
        u = np.asarray(u, dtype=float)
        d = self._spline()(u, 1)
        t = np.stack([np.ones_like(d), d], axis=-1) @ self.frame.T
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    def to_local(self, P):
        """Local (u, v) coordinates of lifted points, nearest periodic copy."""
        d = np.asarray(P, dtype=float) - self.origin
        d = d - np.round(d)
        return d @ self.frame

    def arclength(self, u):
        """Arc length from x[0] to u."""
        u = np.asarray(u, dtype=float)
        if np.all(self.phi == 0):
            return u - self.x[0]
        fine = np.linspace(self.x[0], self.x[-1], 16 * len(self.x))
        sp = self._spline()
        speed = np.sqrt(1.0 + sp(fine, 1) ** 2)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine))])
        return np.interp(u, fine, cum)

    def u_at_arclength(self, s):
        s = np.asarray(s, dtype=float)
        if np.all(self.phi == 0):
            return s + self.x[0]
        fine = np.linspace(self.x[0], self.x[-1], 16 * len(self.x))
        return np.interp(s, self.arclength(fine), fine)

    def point_at_arclength(self, s):
        return self.point(self.u_at_arclength(s))

    def tangent_at_arclength(self, s):
        return self.tangent(self.u_at_arclength(s))


# ---------------------------------------------------------------------------
# graph transform
# ---------------------------------------------------------------------------

def _bound_row(item, lhs, rhs, applicable=True, rtol=1e-9, atol=1e-12):
    return {"item": item, "lhs": float(lhs), "rhs": float(rhs), "applicable": bool(applicable),
            "holds": bool(lhs <= rhs * (1 + rtol) + atol) if applicable else True}


def graph_transform_step(F, chart: CurveChart, window=None, alpha: float = 0.5,
                         eps0: float = 0.01, K: int | None = None) -> CurveChart:
    """Image of a graph chart under a local hyperbolic map.

    The image nodes are exact images of the old nodes; the new uniform mesh is
    filled by cubic-spline interpolation.  The log-density is pushed by the
    arc-length change of variables.  ``window`` = (a, b) clips the new
    domain.  The resulting chart carries a report on the four bound items.
    """
    lam = F.lam
    if not lam > 1:
        raise ValidationError("hypothesis failed: min(sigma1, 1/sigma2) >= lambda > 1")
    has_norms = isinstance(F, LocalMap)
    radius = float(np.max(np.hypot(chart.x, chart.phi)))
    p0, p1, p2 = chart.c0(), chart.c1(), chart.c2()
    if has_norms:
        e1, e2 = F.eps1(radius), F.eps2(radius)
        fc2 = F.f_c2()
        if not e2 < 1.0 / lam:
            raise ValidationError("hypothesis failed: ||f2||_C1 < 1/lambda")
        if not lam - e1 - e1 * p1 > 0:
            raise ValidationError("hypothesis failed: lambda - eps1 - eps1 ||phi||_1 > 0")
    else:
        X0, Y0 = F.apply(np.zeros(1), np.zeros(1))
        if abs(X0[0]) > 1e-12 or abs(Y0[0]) > 1e-12:
            raise ValidationError("hypothesis failed: F(0, 0) = (0, 0)")

    sp = CubicSpline(chart.x, chart.phi)
    dphi = sp(chart.x, 1)
    X, Y = F.apply(chart.x, chart.phi)
    if np.any(np.diff(X) <= 0):
        raise ValidationError("hypothesis failed: image is not a graph over the first axis")
    J = F.jac(chart.x, chart.phi)
    tang = matvec(J, np.stack([np.ones_like(dphi), dphi], axis=-1))
    stretch = np.hypot(tang[:, 0], tang[:, 1]) / np.sqrt(1.0 + dphi ** 2)
    lr = chart.logrho - np.log(stretch)

    a, b = X[0], X[-1]
    if window is not None:
        a, b = max(a, window[0]), min(b, window[1])
        if not b > a:
            raise ValidationError("window does not meet the image domain")
    K = len(chart.x) if K is None else K
    xn = np.linspace(a, b, K)
    xn[0], xn[-1] = max(xn[0], X[0]), min(xn[-1], X[-1])
    new = CurveChart(xn, CubicSpline(X, Y)(xn), CubicSpline(X, lr)(xn), chart.origin, chart.frame)

    rep = []
    if has_norms:
        small = e1 < eps0 and e2 < eps0 and p1 < eps0
        gain = lam - e1 - e1 * p1
        # every row reads lhs <= rhs
        rep.append(_bound_row(1, gain * (chart.x[-1] - chart.x[0]), X[-1] - X[0]))
        # sup norms are sampled on the mesh; allow the O(h^2) sampling error
        disc = max(1e-9, 10.0 * chart.h ** 2)
        rep.append(_bound_row("2a", new.c0(), p0 / lam + e2, rtol=disc))
        rep.append(_bound_row("2b", new.c1(), (p1 / lam + e2 + e2 * p1) / gain, rtol=disc))
        rep.append(_bound_row(3, new.c2(), lam ** -1.99 * fc2 + lam ** -2.99 * p2, small))
        rep.append(_bound_row(4, new.holder(alpha),
                              lam ** (-0.9 * alpha) * (chart.holder(alpha) + fc2 + p2), small))
    new.report = rep
    return new


def bounds_hold(chart: CurveChart) -> bool:
    return all(r["holds"] for r in (chart.report or []))


# ---------------------------------------------------------------------------
# Wedin bound
# ---------------------------------------------------------------------------

def wedin_angle_bound(A, E, det_tol: float = 1e-9) -> tuple:
    """(2 sqrt 2 ||E|| / ||A||, |sin angle(v_A, v_{A+E})|).

    v_M is the most expanded right singular vector, from the closed form.
    """
    A = np.asarray(A, dtype=float)
    E = np.asarray(E, dtype=float)
    B = A + E
    for M, name in ((A, "A"), (B, "A+E")):
        if abs(np.linalg.det(M) - 1.0) > det_tol:
            raise ValidationError(f"{name} is not in SL(2,R)")
    nA = float(norm2(A))
    nE = float(norm2(E))
    if nA < 2.0:
        raise ValidationError("Wedin bound needs ||A|| >= 2")
    if nE > nA / 2.0:
        raise ValidationError("Wedin bound needs ||E|| <= ||A|| / 2")
    if nE == 0.0:
        return 0.0, 0.0
    ta, _ = _right_split(A)
    tb, _ = _right_split(B)
    return 2.0 * math.sqrt(2.0) * nE / nA, float(math.sin(angle_dist(ta, tb)))


# ---------------------------------------------------------------------------
# fake stable leaves
# ---------------------------------------------------------------------------

@dataclass
class FakeLeaf:
    """Polyline through ``base``; ``s`` is signed arc length, 0 at the base."""

    base: np.ndarray
    n: int
    nodes: np.ndarray
    s: np.ndarray
    tangent: float
    theta_s: float
    sigma1: float
    short: bool = False
    offsets: np.ndarray | None = None  # nodes - base, kept exactly
    history: np.ndarray | None = None  # (n+1, k, 2): f^t(node) - f^t(base)
    history_s: np.ndarray | None = None

    @property
    def half_lengths(self) -> tuple:
        return float(-self.s[0]), float(self.s[-1])

    def point(self, s):
        return np.stack([CubicSpline(self.s, self.nodes[:, 0])(s),
                         CubicSpline(self.s, self.nodes[:, 1])(s)], axis=-1)

    def max_spacing(self) -> float:
        return float(np.max(np.hypot(*np.diff(self.nodes, axis=0).T)))


def _least_left_angle(P):
    """Angle of the most contracted left singular vector (image of E^s)."""
    t, _ = _right_split(np.swapaxes(P, -1, -2))
    return np.mod(t + math.pi / 2, math.pi)


def _signed_diff(t, ref):
    return np.mod(t - ref + math.pi / 2, math.pi) - math.pi / 2


def _product(jacs):
    """Renormalized product of jacs (n, ..., 2, 2) and its log-scale."""
    P = np.broadcast_to(np.eye(2), jacs.shape[1:]).copy()
    ls = np.zeros(jacs.shape[1:-2])
    for J in jacs:
        P = J @ P
        s = np.max(np.abs(P), axis=(-2, -1))
        P = P / s[..., None, None]
        ls = ls + np.log(s)
    return P, ls


def _pullback(tup, syms, pts, Z, keep=False):
    """Offsets at time n (relative to pts[n]) pulled back to time 0."""
    n = len(syms)
    shape_extra = Z.ndim - pts.ndim + 1
    hist = [None] * (n + 1)
    hist[n] = Z
    for k in range(n, 0, -1):
        Q = pts[k].reshape(pts[k].shape[:-1] + (1,) * shape_extra + (2,))
        Z = tup.maps[syms[k - 1]].inv_offset(np.broadcast_to(Q, Z.shape), Z)
        hist[k - 1] = Z
    return (Z, hist) if keep else Z


_PATCH_POWERS = [(p, q) for p in range(4) for q in range(4)]


def _patch_basis(a, b):
    return np.stack([a ** p * b ** q for p, q in _PATCH_POWERS], axis=-1)


def fake_stable_leaves(tup: MapTuple, word, X, n: int, delta: float, mesh: float | None = None,
                       grid=(33, 5), max_refine: int = 5, keep_history: bool = False) -> list:
    """Fake stable leaves of half-length delta through each row of X (B, 2).

    Near z = f^n(x) the pushed direction field V_n(y) (least left singular
    direction of Df^n at f^{-n} y) is sampled on an along x across grid of
    half-size (1.25 delta / ||Df^n||, a quarter of that), smoothed by a bicubic
    least-squares patch, integrated through z with RK4 and pulled back.

    With ``keep_history`` each leaf stores the offsets of its nodes at every
    intermediate time, i.e. the exact orbit f^t(leaf) for t = 0..n.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = len(X)
    syms = as_symbols(word, n, tup.m)
    mesh = delta / 100.0 if mesh is None else mesh
    pts, jacs = orbit(tup, syms, X)
    P, ls = _product(jacs)
    _, ls1 = _right_split(P)
    lsig = ls1 + ls
    if np.any(lsig < math.log(2.0)):
        raise ValidationError("fake leaf needs ||Df^n(x)|| >= 2 (product degenerate)")
    sigma1 = np.exp(lsig)
    tu0, _ = _right_split(P)
    theta_s = np.mod(tu0 + math.pi / 2, math.pi)
    tc = _least_left_angle(P)

    Ra = 1.25 * delta / sigma1
    Rb = Ra / 4.0
    e_al = unit(tc)
    e_ac = np.stack([-e_al[:, 1], e_al[:, 0]], axis=-1)
    ga, gb = np.meshgrid(np.linspace(-1, 1, grid[0]), np.linspace(-1, 1, grid[1]), indexing="ij")
    ga, gb = ga.ravel(), gb.ravel()
    Zg = (Ra[:, None, None] * ga[None, :, None] * e_al[:, None, :]
          + Rb[:, None, None] * gb[None, :, None] * e_ac[:, None, :])
    _, hist = _pullback(tup, syms, pts, Zg, keep=True)
    Jg = np.stack([tup.maps[syms[k]].jac(pts[k][:, None, :] + hist[k]) for k in range(n)])
    Pg, _ = _product(Jg)
    dth = _signed_diff(_least_left_angle(Pg), tc[:, None])
    basis = _patch_basis(ga, gb)
    coef = np.linalg.lstsq(basis, dth.T, rcond=None)[0].T  # (B, 16)

    def field(Y):
        a = np.einsum("bkj,bj->bk", Y, e_al) / Ra[:, None]
        b = np.einsum("bkj,bj->bk", Y, e_ac) / Rb[:, None]
        th = tc[:, None] + np.einsum("bkm,bm->bk", _patch_basis(a, b), coef)
        return unit(th)

    def integrate(steps, sign):
        h = sign * (Ra / steps)[:, None, None]
        Y = np.zeros((B, 1, 2))
        out = [Y[:, 0]]
        for _ in range(steps):
            k1 = field(Y)
            k2 = field(Y + 0.5 * h * k1)
            k3 = field(Y + 0.5 * h * k2)
            k4 = field(Y + h * k3)
            Y = Y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            out.append(Y[:, 0])
        return np.stack(out, axis=1)

    steps = max(8, int(math.ceil(1.25 * delta / mesh)))
    for _ in range(max_refine + 1):
        fw = integrate(steps, 1.0)
        bw = integrate(steps, -1.0)
        Zn = np.concatenate([bw[:, :0:-1], fw], axis=1)  # (B, 2 steps + 1, 2)
        Z0, hist = _pullback(tup, syms, pts, Zn, keep=True)
        spacing = np.hypot(*np.diff(Z0, axis=1).transpose(2, 0, 1))
        if spacing.max() <= mesh:
            break
        steps *= 2

    # exact tangent at the base: Df^n(x)^{-1} applied to the field at z
    Pinv = np.stack([np.stack([P[:, 1, 1], -P[:, 0, 1]], -1),
                     np.stack([-P[:, 1, 0], P[:, 0, 0]], -1)], axis=1)
    v0 = matvec(Pinv, field(np.zeros((B, 1, 2)))[:, 0])
    t0 = np.mod(np.arctan2(v0[:, 1], v0[:, 0]), math.pi)

    leaves = []
    c = steps
    for i in range(B):
        nodes = X[i] + Z0[i]
        seg = np.hypot(*np.diff(nodes, axis=0).T)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        s = s - s[c]
        # orient so s increases along the +tangent side
        short = bool(-s[0] < delta or s[-1] < delta)
        keep = (s >= -delta) & (s <= delta)
        lo, hi = np.nonzero(keep)[0][[0, -1]]
        z = Z0[i]
        ss, nn = list(s[lo:hi + 1]), list(z[lo:hi + 1])
        if lo > 0:
            w = (-delta - s[lo - 1]) / (s[lo] - s[lo - 1])
            ss.insert(0, -delta)
            nn.insert(0, z[lo - 1] + w * (z[lo] - z[lo - 1]))
        if hi < len(s) - 1:
            w = (delta - s[hi]) / (s[hi + 1] - s[hi])
            ss.append(delta)
            nn.append(z[hi] + w * (z[hi + 1] - z[hi]))
        ss, nn = np.array(ss), np.array(nn)
        if len(ss) > 1 and ss[1] - ss[0] < 1e-3 * mesh:
            ss, nn = np.delete(ss, 1), np.delete(nn, 1, axis=0)
        if len(ss) > 2 and ss[-1] - ss[-2] < 1e-3 * mesh:
            ss, nn = np.delete(ss, -2), np.delete(nn, -2, axis=0)
        leaf = FakeLeaf(X[i].copy(), n, X[i] + nn, ss, float(t0[i]), float(theta_s[i]),
                        float(sigma1[i]), short, nn)
        if keep_history:
            leaf.history = np.stack([hk[i, lo:hi + 1] for hk in hist])
            leaf.history_s = s[lo:hi + 1].copy()
        leaves.append(leaf)
    return leaves


def fake_stable_leaf(tup: MapTuple, word, x, n: int, delta: float, **kw) -> FakeLeaf:
    return fake_stable_leaves(tup, word, np.asarray(x, dtype=float)[None], n, delta, **kw)[0]


def leaf_crossing(leaf: FakeLeaf, chart: CurveChart, tol: float = 1e-12):
    """Leaf parameter and chart parameter u where the leaf meets the chart.

    Bisection in leaf arc length on the signed height above the chart graph.
    Returns (s, u) or None when the leaf misses the chart.
    """
    loc = chart.to_local(leaf.nodes)
    sp = CubicSpline(chart.x, chart.phi)
    inside = (loc[:, 0] >= chart.x[0]) & (loc[:, 0] <= chart.x[-1])
    h = loc[:, 1] - sp(np.clip(loc[:, 0], chart.x[0], chart.x[-1]))
    sgn = np.sign(h)
    idx = np.nonzero((sgn[:-1] * sgn[1:] <= 0) & inside[:-1] & inside[1:])[0]
    if len(idx) == 0:
        return None
    j = idx[np.argmin(np.abs(leaf.s[idx]))]
    ox, oy = CubicSpline(leaf.s, leaf.nodes[:, 0]), CubicSpline(leaf.s, leaf.nodes[:, 1])

    def height(s):
        q = chart.to_local(np.array([ox(s), oy(s)]))
        return q[1] - sp(q[0]), q[0]

    a, b = leaf.s[j], leaf.s[j + 1]
    ha, _ = height(a)
    if ha == 0:
        return a, height(a)[1]
    for _ in range(200):
        if b - a <= tol:
            break
        m = 0.5 * (a + b)
        hm, _ = height(m)
        if (hm > 0) == (ha > 0) and hm != 0:
            a, ha = m, hm
        else:
            b = m
    s = 0.5 * (a + b)
    return s, float(height(s)[1])


@dataclass
class HolonomySample:
    source_s: np.ndarray
    image_s: np.ndarray
    source_pts: np.ndarray
    image_pts: np.ndarray
    jac_formula: np.ndarray
    jac_fd: np.ndarray
    miss: np.ndarray
    n: int
    monotone: bool = True


def _formula_jacobian(tup, syms, y, tau_y, q, tau_q):
    """prod_k ||Df tau1_k|| / ||Df tau2_k|| times the end-time projection Jacobian."""
    def transport(p, tau):
        pts, jacs = orbit(tup, syms, p)
        v = tau
        lg = np.zeros(len(p))
        for J in jacs:
            w = matvec(J, v)
            r = np.hypot(w[:, 0], w[:, 1])
            lg += np.log(r)
            v = w / r[:, None]
        P, _ = _product(jacs)
        return lg, v, _least_left_angle(P)

    l1, v1, V1 = transport(y, tau_y)
    l2, v2, V2 = transport(q, tau_q)
    a1 = np.arctan2(v1[:, 1], v1[:, 0])
    a2 = np.arctan2(v2[:, 1], v2[:, 0])
    proj = np.abs(np.sin(a1 - V1)) / np.abs(np.sin(a2 - V2))
    return np.exp(l1 - l2) * proj


def fake_holonomy(tup: MapTuple, word, n: int, T1: CurveChart, T2: CurveChart, sources,
                  delta: float, fd_step: float = 1e-4, theta0: float = 0.05,
                  **leaf_kw) -> HolonomySample:
    """Slide source points of T1 along their fake leaves onto T2.

    ``sources`` are arc-length parameters on T1; image parameters are arc
    length on T2.  Jacobians come from the product formula and, for
    cross-validation, from central differences of the holonomy map.
    """
    src = np.atleast_1d(np.asarray(sources, dtype=float))
    syms = as_symbols(word, n, tup.m)
    m = len(src)
    allsrc = np.concatenate([src, src - fd_step, src + fd_step])
    Y = np.mod(T1.point_at_arclength(allsrc), 1.0)
    leaves = fake_stable_leaves(tup, syms, Y, n, delta, **leaf_kw)
    tau1 = T1.tangent_at_arclength(allsrc)
    ang = np.array([angle_dist(lf.tangent, math.atan2(t[1], t[0])) for lf, t in zip(leaves, tau1)])
    if np.any(ang < theta0):
        raise ValidationError(f"T1 is not transverse to the leaves (angle {ang.min():.3g} < {theta0})")
    ts = np.full(len(allsrc), np.nan)
    for i, lf in enumerate(leaves):
        hit = leaf_crossing(lf, T2)
        if hit is not None:
            ts[i] = T2.arclength(hit[1])
    miss = np.isnan(ts[:m]) | np.isnan(ts[m:2 * m]) | np.isnan(ts[2 * m:])
    t = ts[:m]
    fd = np.abs(ts[2 * m:] - ts[m:2 * m]) / (2.0 * fd_step)
    ok = ~np.isnan(t)
    jf = np.full(m, np.nan)
    Q = np.full((m, 2), np.nan)
    if np.any(ok):
        q = np.mod(T2.point_at_arclength(t[ok]), 1.0)
        Q[ok] = q
        tau2 = T2.tangent_at_arclength(t[ok])
        jf[ok] = _formula_jacobian(tup, syms, Y[:m][ok], tau1[:m][ok], q, tau2)
    d = np.diff(t[ok])
    mono = bool(np.all(d > 0) or np.all(d < 0)) if len(d) else True
    return HolonomySample(src, t, Y[:m], Q, jf, fd, miss, n, mono)
