"""Empirical mixing: correlation series, exponential rate fits, C_omega tails
and equidistribution of standard pairs.

Observables are finite trigonometric sums, so their integrals are exact and a
lattice of N x N points integrates every mode with |p|, |q| < N exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fitting import LineFit, linfit, loglog_fit
from .pairs import StandardPair
from .rds_core import MapTuple, ValidationError, as_symbols, matvec, word_stream

TWO_PI = 2.0 * math.pi
DEFAULT_FLOOR = 1e-12
DEFAULT_N = 512
TILE = 1 << 16


@dataclass(frozen=True)
class Observable:
    """sum_k a_k cos(2 pi (p_k x + q_k y) + phase_k)."""
    modes: tuple  # ((p, q, amplitude, phase), ...)

    def __post_init__(self):
        clean = []
        for md in self.modes:
            p, q, a, ph = md
            if int(p) != p or int(q) != q:
                raise ValidationError("observable frequencies must be integers")
            clean.append((int(p), int(q), float(a), float(ph)))
        object.__setattr__(self, "modes", tuple(clean))

    @classmethod
    def cos(cls, p: int, q: int, amplitude: float = 1.0, phase: float = 0.0) -> "Observable":
        return cls(((p, q, amplitude, phase),))

    @classmethod
    def from_json(cls, d) -> "Observable":
        if isinstance(d, dict):
            d = d.get("modes", [])
        return cls(tuple(tuple(m) for m in d))

    def to_json(self) -> list:
        return [list(m) for m in self.modes]

    def __call__(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        out = np.zeros(P.shape[:-1])
        for p, q, a, ph in self.modes:
            out += a * np.cos(TWO_PI * (p * P[..., 0] + q * P[..., 1]) + ph)
        return out

    @property
    def exact_integral(self) -> float:
        return float(sum(a * math.cos(ph) for p, q, a, ph in self.modes if p == 0 and q == 0))

    @property
    def max_frequency(self) -> int:
        return max((max(abs(p), abs(q)) for p, q, _, _ in self.modes), default=0)

    @property
    def sup_bound(self) -> float:
        return float(sum(abs(a) for _, _, a, _ in self.modes))

    @property
    def holder_bound(self) -> float:
        """Lipschitz constant bound 2 pi sum |k| |a|."""
        return TWO_PI * float(sum(math.hypot(p, q) * abs(a) for p, q, a, _ in self.modes))


@dataclass
class CorrelationSeries:
    n: np.ndarray
    C: np.ndarray
    mode: str
    streams: tuple = ()
    stderr: np.ndarray | None = None   # Monte Carlo only


def lattice_points(N: int) -> np.ndarray:
    t = np.arange(N) / N
    X, Y = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def decoherence_horizon(tup: MapTuple, phi: Observable, psi: Observable, N: int = DEFAULT_N) -> int:
    """Last n for which the image of the top mode stays below the lattice Nyquist band.

    Beyond it lattice images decohere and the series settles at a ~1/N noise
    floor, so exponential fits are restricted to n <= this horizon.
    """
    k = max(phi.max_frequency, psi.max_frequency, 1)
    grow = max(f.bounds()[0] for f in tup.maps)
    if grow <= 1.0:
        return 10 ** 6
    return max(2, int(math.floor(math.log(N / (2.0 * k)) / math.log(grow))))


def _tiled_mean(v: np.ndarray) -> float:
    # fixed tile order so the reduction never depends on how work is split
    parts = [float(np.sum(v[i:i + TILE])) for i in range(0, len(v), TILE)]
    return math.fsum(parts) / len(v)


def _check_lattice(N: int, phi: Observable, psi: Observable):
    need = 2 * max(phi.max_frequency, psi.max_frequency)
    if N < max(need, 1):
        raise ValidationError(f"lattice N = {N} aliases the observables; need N >= {need}")


def quenched_correlation(tup: MapTuple, word, phi: Observable, psi: Observable, nmax: int,
                         N: int = DEFAULT_N, M: int | None = None, seed: int = 0,
                         stream: int = 0) -> CorrelationSeries:
    """C_n = <phi, psi o f^n_w> - int phi int psi for n = 0..nmax.

    Lattice quadrature by default; with M given, M uniform points drawn from
    (seed, stream) and CLT standard errors attached.
    """
    if nmax < 0:
        raise ValidationError("nmax must be >= 0")
    syms = as_symbols(word, nmax, tup.m)
    if M is None:
        _check_lattice(N, phi, psi)
        P = lattice_points(N)
    else:
        if M < 2:
            raise ValidationError("Monte Carlo quadrature needs M >= 2")
        P = np.random.default_rng([seed, stream, M]).random((M, 2))
    a = phi(P)
    mean_phi = phi.exact_integral
    mean_psi = psi.exact_integral
    C = np.empty(nmax + 1)
    se = np.empty(nmax + 1) if M is not None else None
    Q = P
    for k in range(nmax + 1):
        if k:
            Q = tup.maps[syms[k - 1]].apply(Q)
        v = a * psi(Q)
        C[k] = _tiled_mean(v) - mean_phi * mean_psi
        if se is not None:
            se[k] = float(np.std(v, ddof=1)) / math.sqrt(len(v))
    return CorrelationSeries(np.arange(nmax + 1), C, "quenched", (stream,), se)


def correlation(tup: MapTuple, phi: Observable, psi: Observable, nmax: int,
                mode: str = "quenched", word=None, streams=None, seed: int = 0,
                N: int = DEFAULT_N, M: int | None = None) -> CorrelationSeries:
    """Quenched series for one word, or the annealed mean over word streams."""
    if mode == "quenched":
        if word is None:
            word = word_stream(seed, 0, tup.m)
        return quenched_correlation(tup, word, phi, psi, nmax, N, M, seed, getattr(word, "stream", 0))
    if mode == "annealed":
        if streams is None:
            raise ValidationError("annealed mode needs word streams")
        series = [quenched_correlation(tup, word_stream(seed, s, tup.m), phi, psi, nmax, N, M, seed, s)
                  for s in streams]
        return annealed_from(series)
    raise ValidationError(f"unknown correlation mode {mode!r}")


def annealed_from(series: list) -> CorrelationSeries:
    if not series:
        raise ValidationError("annealed mean of an empty ensemble")
    stack = np.stack([s.C for s in series])
    return CorrelationSeries(series[0].n.copy(), np.mean(stack, axis=0), "annealed",
                             tuple(st for s in series for st in s.streams))


@dataclass(frozen=True)
class MixingFit:
    eta_hat: float
    C_hat: float
    r2: float
    window: tuple  # (first n, last n) among the points used
    npoints: int

    @property
    def degenerate(self) -> bool:
        return self.npoints < 3 or not math.isfinite(self.eta_hat)


def rate_fit(series, floor: float = DEFAULT_FLOOR, n=None, window=None) -> MixingFit:
    """Least squares of ln|C_n| on n over points with |C_n| > floor.

    `series` is a CorrelationSeries or an array indexed from n = 0; `window`
    optionally restricts n to [lo, hi].
    """
    if isinstance(series, CorrelationSeries):
        n, C = series.n, series.C
    else:
        C = np.asarray(series, dtype=float)
        n = np.arange(len(C)) if n is None else np.asarray(n)
    n = np.asarray(n, dtype=float)
    v = np.abs(np.asarray(C, dtype=float))
    keep = np.isfinite(v) & (v > floor)
    if window is not None:
        keep &= (n >= window[0]) & (n <= window[1])
    if keep.sum() < 3:
        w = (float(n[keep].min()), float(n[keep].max())) if keep.any() else (float("nan"),) * 2
        return MixingFit(float("nan"), float("nan"), 0.0, w, int(keep.sum()))
    fit = linfit(n[keep], np.log(v[keep]))
    return MixingFit(-fit.slope, math.exp(fit.intercept), fit.r2,
                     (float(n[keep].min()), float(n[keep].max())), fit.npoints)


def pooled_rate_fit(series: list, floor: float = DEFAULT_FLOOR, window=None) -> MixingFit:
    """One least-squares line through ln|C_n| of every quenched series.

    Unlike the annealed fit this averages logs, not correlations, so it is a
    typical-word rate.
    """
    n = np.concatenate([np.asarray(s.n, dtype=float) for s in series])
    C = np.concatenate([np.asarray(s.C, dtype=float) for s in series])
    return rate_fit(C, floor, n=n, window=window)


def fixed_rate_prefactor(series, eta: float, floor: float = DEFAULT_FLOOR, window=None) -> float:
    """Prefactor of the best fit of ln|C_n| with slope -eta held fixed."""
    n, C = series.n, series.C
    v = np.abs(C)
    keep = v > floor
    if window is not None:
        keep &= (n >= window[0]) & (n <= window[1])
    if not keep.any():
        return float("nan")
    return math.exp(float(np.mean(np.log(v[keep]) + eta * n[keep])))


@dataclass
class COmegaTail:
    streams: tuple
    fits: list
    eta_median: float
    C_omega: np.ndarray
    grid: np.ndarray
    survival: np.ndarray
    slope_fit: LineFit
    series: list = field(default_factory=list, repr=False)

    @property
    def slope(self) -> float:
        return self.slope_fit.slope


def survival_curve(values, grid) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=float))
    return 1.0 - np.searchsorted(v, grid, side="left") / len(v)


def c_omega_tail(tup: MapTuple, phi: Observable, psi: Observable, nmax: int, streams,
                 seed: int = 0, N: int = DEFAULT_N, floor: float = DEFAULT_FLOOR,
                 window=None, grid_points: int = 24, series=None) -> COmegaTail:
    """Per-word prefactors at the ensemble-median rate and their survival curve."""
    streams = tuple(streams)
    if len(streams) < 30:
        raise ValidationError("c_omega_tail needs at least 30 words")
    if series is None:
        series = [quenched_correlation(tup, word_stream(seed, s, tup.m), phi, psi, nmax, N,
                                       seed=seed, stream=s) for s in streams]
    fits = [rate_fit(s, floor, window=window) for s in series]
    good = [f.eta_hat for f in fits if not f.degenerate]
    if len(good) < max(3, len(fits) // 2):
        raise ValidationError("too few non-degenerate rate fits for a C_omega tail")
    eta = float(np.median(good))
    Cw = np.array([fixed_rate_prefactor(s, eta, floor, window) for s in series])
    Cw = Cw[np.isfinite(Cw)]
    lo, hi = float(Cw.min()), float(Cw.max())
    if hi <= lo:
        hi = lo * (1 + 1e-9)
    grid = np.geomspace(lo, hi, grid_points)
    surv = survival_curve(Cw, grid)
    # slope of the tail part: from the median prefactor outwards
    tail = grid >= np.median(Cw)
    fit = loglog_fit(grid[tail], surv[tail], floor=0.0)
    return COmegaTail(streams, fits, eta, Cw, grid, surv, fit, series)


def _refine_source(pair: StandardPair, factor: np.ndarray):
    """Insert factor-1 equally spaced nodes inside each segment; rho linear."""
    X, r = pair.nodes, pair.rho
    pts, rho, seg = [X[:1]], [r[:1]], []
    for i, k in enumerate(factor):
        t = (np.arange(1, k + 1) / k)[:, None]
        pts.append(X[i] + t * (X[i + 1] - X[i]))
        rho.append(r[i] + t[:, 0] * (r[i + 1] - r[i]))
        seg.append(np.full(k, pair.seg[i] / k))
    return np.concatenate(pts), np.concatenate(rho), np.concatenate(seg)


def equidistribution_error(tup: MapTuple, pair: StandardPair, word, phi: Observable, n: int,
                           points_per_wave: int = 16, max_nodes: int = 4_000_000) -> float:
    """|int phi o f^n d rho - int phi dvol| for a unit-mass pair.

    The pushed pair is parametrized by the source curve: the source polyline is
    refined until the image resolves the top frequency of phi, then the
    trapezoid rule is applied to (phi o f^n) rho in source arc length.
    """
    if abs(pair.mass - 1.0) > 1e-9:
        raise ValidationError("equidistribution needs a unit-mass pair")
    syms = as_symbols(word, n, tup.m)
    # expansion of each source segment under Df^n, measured at its start node
    X = pair.nodes
    d = np.diff(X, axis=0)
    V = d / np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-300)[:, None]
    P = X[:-1].copy()
    gain = np.ones(len(P))
    for s in syms:
        P, J = tup.maps[s].apply_with_jac(P)
        V = matvec(J, V)
        r = np.hypot(V[:, 0], V[:, 1])
        gain *= r
        V = V / r[:, None]
    wave = 1.0 / max(phi.max_frequency, 1)
    factor = np.ceil(pair.seg * gain * points_per_wave / wave).astype(int)
    factor = np.maximum(factor, 1)
    if factor.sum() > max_nodes:
        raise ValidationError(f"equidistribution needs {int(factor.sum())} nodes (> {max_nodes})")
    pts, rho, seg = _refine_source(pair, factor)
    Q = pts
    for s in syms:
        Q = tup.maps[s].apply(Q)
    v = phi(Q) * rho
    integral = float(np.sum(0.5 * (v[1:] + v[:-1]) * seg))
    return abs(integral - phi.exact_integral)
