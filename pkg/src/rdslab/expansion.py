"""Expanding-on-average checks: average log-expansion of tangent vectors.

For a point x, unit vector v and horizon n0 the statistic is

    lambda(x, v) = E_w (1/n0) ln ||Df^{n0}_w(x) v||

with w uniform over the m^{n0} words.  A tuple expands on average when the
minimum over the unit tangent bundle is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rds_core import MapTuple, ValidationError, matvec, unit, word_stream

DEFAULT_CAP = 10 ** 6


@dataclass
class ExpansionReport:
    n0: int
    lambda_min: float
    argmin: tuple  # ((x, y), theta)
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    mean: np.ndarray
    halfwidth: np.ndarray
    mode: str
    confidence: tuple | None = None  # (level, halfwidth)
    lipschitz: float = float("nan")
    mesh: float = float("nan")
    warnings: list = field(default_factory=list)

    @property
    def heuristic_lower_bound(self) -> float:
        return self.lambda_min - self.lipschitz * self.mesh

    @property
    def passed(self) -> bool:
        return self.lambda_min > 0

    def summary(self) -> dict:
        return {
            "n0": self.n0,
            "mode": self.mode,
            "lambda_min": self.lambda_min,
            "argmin": {"x": self.argmin[0][0], "y": self.argmin[0][1], "theta": self.argmin[1]},
            "expanding_on_average": bool(self.passed),
            "lipschitz": self.lipschitz,
            "mesh": self.mesh,
            "heuristic_lower_bound": self.heuristic_lower_bound,
            "confidence": None if self.confidence is None else
            {"level": self.confidence[0], "halfwidth": self.confidence[1]},
            "warnings": list(self.warnings),
        }


def point_grid(G: int) -> np.ndarray:
    """G x G lattice of cell corners, flattened to (G*G, 2)."""
    if G < 1:
        raise ValidationError("point grid needs G >= 1")
    t = np.arange(G) / G
    X, Y = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def direction_grid(D: int, extra=()) -> np.ndarray:
    if D < 1:
        raise ValidationError("direction grid needs D >= 1")
    th = np.arange(D) * (math.pi / D)
    extra = np.mod(np.asarray(list(extra), dtype=float), math.pi)
    return np.concatenate([th, extra])


def _grid_states(points, thetas):
    P = np.repeat(points, len(thetas), axis=0)
    T = np.tile(thetas, len(points))
    return P, T


def _lipschitz(tup: MapTuple, n0: int, G: int, D: int):
    # heuristic modulus: c2^(2 n0) times the largest distance to a grid node
    L = float(tup.c2_bound) ** (2 * n0)
    mesh = max(math.sqrt(2.0) / (2.0 * G), math.pi / (2.0 * D))
    return L, mesh


def _report(tup, n0, P, T, mean, hw, mode, G, D, confidence=None, lower=None):
    score = mean if lower is None else lower
    i = int(np.argmin(score))
    L, mesh = _lipschitz(tup, n0, G, D)
    rep = ExpansionReport(
        n0=n0, lambda_min=float(score[i]), argmin=((float(P[i, 0]), float(P[i, 1])), float(T[i])),
        x=P[:, 0].copy(), y=P[:, 1].copy(), theta=T, mean=mean, halfwidth=hw, mode=mode,
        confidence=confidence, lipschitz=L, mesh=mesh,
    )
    rep.warnings.append(
        "grid minimum only; lambda_min - lipschitz*mesh is a heuristic global bound"
    )
    return rep


def eoa_exact(tup: MapTuple, n0: int, G: int = 16, D: int = 128, extra_directions=(),
              cap: int = DEFAULT_CAP, points=None) -> ExpansionReport:
    """Exact average over all m^n0 words by depth-first enumeration."""
    if n0 < 1:
        raise ValidationError("n0 must be >= 1")
    if tup.m ** n0 > cap:
        raise ValidationError(
            f"m^n0 = {tup.m ** n0} exceeds the enumeration cap {cap}; use monte_carlo mode"
        )
    pts = point_grid(G) if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
    thetas = direction_grid(D, extra_directions)
    P, T = _grid_states(pts, thetas)
    V = unit(T)

    def dfs(depth, P, V):
        if depth == n0:
            return np.zeros(len(P))
        total = np.zeros(len(P))
        for f in tup.maps:
            Q, J = f.apply_with_jac(P)
            W = matvec(J, V)
            r = np.hypot(W[:, 0], W[:, 1])
            total += tup.m ** (n0 - depth - 1) * np.log(r)
            total += dfs(depth + 1, Q, W / r[:, None])
        return total

    mean = dfs(0, P, V) / (n0 * tup.m ** n0)
    return _report(tup, n0, P, T, mean, np.zeros_like(mean), "exact", G, D)


def hoeffding_halfwidth(c: float, delta: float, M: int) -> float:
    """c * sqrt(ln(2/delta) / (2 M)) for samples in a range of width c."""
    if M < 1:
        raise ValidationError("need at least one sample")
    return c * math.sqrt(math.log(2.0 / delta) / (2.0 * M))


def eoa_monte_carlo(tup: MapTuple, n0: int, M: int, delta: float = 0.05, G: int = 16,
                    D: int = 128, seed: int = 0, extra_directions=(),
                    points=None) -> ExpansionReport:
    """Sample M words (streams 0..M-1) shared by every grid node.

    Each sample (1/n0) ln||Df^n0 v|| lies in [-ln c, ln c] with c the
    tuple's c2_bound, so the Hoeffding range width is 2 ln c.
    """
    if M < 1:
        raise ValidationError("monte_carlo mode needs M >= 1")
    if n0 < 1:
        raise ValidationError("n0 must be >= 1")
    pts = point_grid(G) if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
    thetas = direction_grid(D, extra_directions)
    P0, T = _grid_states(pts, thetas)
    V0 = unit(T)
    acc = np.zeros(len(P0))
    for j in range(M):
        syms = word_stream(seed, j, tup.m).symbols(n0)
        P, V = P0.copy(), V0.copy()
        for s in syms:
            P, J = tup.maps[s].apply_with_jac(P)
            W = matvec(J, V)
            r = np.hypot(W[:, 0], W[:, 1])
            acc += np.log(r)
            V = W / r[:, None]
    mean = acc / (n0 * M)
    c = 2.0 * math.log(max(float(tup.c2_bound), 1.0))
    hw = hoeffding_halfwidth(c, delta, M)
    hwa = np.full_like(mean, hw)
    return _report(tup, n0, P0, T, mean, hwa, "monte_carlo", G, D,
                   confidence=(1.0 - delta, hw), lower=mean - hwa)


def eoa_search(tup: MapTuple, n0_max: int = 8, G: int = 16, D: int = 128,
               cap: int = DEFAULT_CAP, extra_directions=(), mode: str = "exact",
               M: int = 2000, delta: float = 0.05, seed: int = 0) -> list:
    """Escalate n0 = 1, 2, ... until lambda_min > 0, the cap or n0_max."""
    reports = []
    for n0 in range(1, n0_max + 1):
        if mode == "exact":
            if tup.m ** n0 > cap:
                break
            rep = eoa_exact(tup, n0, G, D, extra_directions, cap)
        else:
            rep = eoa_monte_carlo(tup, n0, M, delta, G, D, seed, extra_directions)
        reports.append(rep)
        if rep.passed:
            break
    if not reports:
        raise ValidationError("enumeration cap exceeded at n0 = 1; use monte_carlo mode")
    return reports
