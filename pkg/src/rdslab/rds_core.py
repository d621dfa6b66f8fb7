"""Phase space, map ensembles, random words and cocycle products on the 2-torus.

Points are arrays of shape ``(..., 2)`` holding ``(x, y)``.  Maps are
compositions of primitive steps (integer or real SL(2) matrices and
trigonometric shears), each with closed-form image, inverse and differential,
so every derivative used downstream is exact up to rounding.

Symbols are 0-based: a tuple of ``m`` maps is indexed by ``0..m-1``.

Word streams use the splitmix64 finalizer::

    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (mod 2**64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (mod 2**64)
        return z ^ (z >> 31)

    symbol(seed, stream, i) = mix64(seed ^ rotl64(stream, 32) ^ (GOLDEN * i)) mod m

with ``GOLDEN = 0x9E3779B97F4A7C15`` and all arithmetic on unsigned 64-bit
integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
RENORM_THRESHOLD = 1e100


class ValidationError(ValueError):
    """Raised when a map, tuple or word specification is invalid."""


# ---------------------------------------------------------------------------
# word streams
# ---------------------------------------------------------------------------

def _u64(v) -> np.ndarray:
    return np.asarray(v, dtype=np.uint64)


def mix64(z) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = _u64(z).copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


def rotl64(v: int, r: int) -> int:
    v &= MASK64
    return ((v << r) | (v >> (64 - r))) & MASK64


@dataclass(frozen=True)
class WordStream:
    """Deterministic symbol sequence; symbol ``i`` depends only on (seed, stream, i).

    ``offset`` realizes the shift: ``ws.shift(j)[i] == ws[i + j]``.
    """

    seed: int
    stream: int
    m: int
    offset: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("word stream needs m >= 1")

    def _key(self) -> np.uint64:
        return np.uint64((int(self.seed) ^ rotl64(int(self.stream), 32)) & MASK64)

    def symbols(self, count: int, start: int = 0) -> np.ndarray:
        idx = np.arange(self.offset + start, self.offset + start + count, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self._key() ^ (np.uint64(GOLDEN) * idx)
        return (mix64(z) % np.uint64(self.m)).astype(np.int64)

    def __getitem__(self, i: int) -> int:
        return int(self.symbols(1, i)[0])

    def shift(self, j: int) -> "WordStream":
        return WordStream(self.seed, self.stream, self.m, self.offset + j)


def word_stream(seed: int, stream: int, m: int) -> WordStream:
    return WordStream(int(seed), int(stream), int(m))


def as_symbols(word, n: int, m: int | None = None) -> np.ndarray:
    """First ``n`` symbols of a WordStream or an explicit sequence."""
    if isinstance(word, WordStream):
        s = word.symbols(n)
    else:
        s = np.asarray(word, dtype=np.int64)[:n]
        if len(s) < n:
            raise ValidationError(f"word has {len(s)} symbols, need {n}")
    if m is not None and len(s) and (s.min() < 0 or s.max() >= m):
        raise ValidationError("symbol out of range")
    return s


# ---------------------------------------------------------------------------
# small 2x2 helpers (vectorized over leading axes)
# ---------------------------------------------------------------------------

def norm2(M: np.ndarray) -> np.ndarray:
    """Operator 2-norm of 2x2 matrices."""
    M = np.asarray(M, dtype=float)
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    # sigma1 = (|z1| + |z2|) / 2 with z1 = (a+d, c-b), z2 = (a-d, b+c); no squares, no cancellation
    return 0.5 * (np.hypot(a + d, c - b) + np.hypot(a - d, b + c))


def det2(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def inv_sl2(M: np.ndarray) -> np.ndarray:
    """Adjugate; the inverse when det = 1."""
    M = np.asarray(M, dtype=float)
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    out[..., 1, 1] = M[..., 0, 0]
    return out


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", M, v)


def unit(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def angle_of(v: np.ndarray) -> np.ndarray:
    """Projective angle in [0, pi) of vectors."""
    return np.mod(np.arctan2(v[..., 1], v[..., 0]), math.pi)


def angle_dist(t1, t2) -> np.ndarray:
    """Distance between projective angles: min(|d|, pi - |d|)."""
    d = np.abs(np.mod(np.asarray(t1) - np.asarray(t2), math.pi))
    return np.minimum(d, math.pi - d)


def torus_dist(p, q) -> np.ndarray:
    d = np.abs(np.asarray(p) - np.asarray(q))
    d = np.mod(d, 1.0)
    d = np.minimum(d, 1.0 - d)
    return np.sqrt((d * d).sum(axis=-1))


# ---------------------------------------------------------------------------
# primitive steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrigPoly:
    """h(t) = sum_k a_k sin(2 pi k t) + b_k cos(2 pi k t) with integer k >= 0."""

    terms: tuple = ()

    def __post_init__(self):
        clean = []
        for term in self.terms:
            if len(term) != 3:
                raise ValidationError("trig term must be (k, a_sin, b_cos)")
            k, a, b = term
            if float(k) != int(k) or int(k) < 0:
                raise ValidationError(f"non-periodic shear frequency {k!r}")
            clean.append((int(k), float(a), float(b)))
        object.__setattr__(self, "terms", tuple(clean))

    def value(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, a, b in self.terms:
            w = TWO_PI * k * t
            out = out + a * np.sin(w) + b * np.cos(w)
        return out

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, a, b in self.terms:
            w = TWO_PI * k
            out = out + w * (a * np.cos(w * t) - b * np.sin(w * t))
        return out

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for k, a, b in self.terms:
            w = TWO_PI * k
            out = out - w * w * (a * np.sin(w * t) + b * np.cos(w * t))
        return out

    def diff(self, t, d):
        """h(t + d) - h(t) without cancellation for small d."""
        t = np.asarray(t, dtype=float)
        d = np.asarray(d, dtype=float)
        out = np.zeros(np.broadcast(t, d).shape)
        for k, a, b in self.terms:
            w = TWO_PI * k
            mid = w * (t + 0.5 * d)
            s = 2.0 * np.sin(0.5 * w * d)
            out = out + a * np.cos(mid) * s - b * np.sin(mid) * s
        return out

    def sup(self, order: int) -> float:
        """l1 bound on sup |h^(order)|."""
        return float(sum((TWO_PI * k) ** order * (abs(a) + abs(b)) for k, a, b in self.terms))

    def to_json(self):
        return [list(t) for t in self.terms]


def _shear_norm(c: float) -> float:
    # largest singular value of [[1, c], [0, 1]]
    return 0.5 * (c + math.sqrt(c * c + 4.0))


class Step:
    d1: float  # bound on sup ||Df||
    d2: float  # bound on sup |D^2 f|


@dataclass(frozen=True)
class Linear(Step):
    matrix: tuple

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (2, 2) or not np.all(np.isfinite(M)):
            raise ValidationError("linear step needs a finite 2x2 matrix")
        if abs(det2(M) - 1.0) > 1e-12:
            raise ValidationError(f"linear step has determinant {det2(M)!r}, expected 1")
        object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in M))

    @property
    def M(self) -> np.ndarray:
        return np.array(self.matrix)

    @property
    def d1(self) -> float:
        return float(norm2(self.M))

    d2 = 0.0

    def apply(self, P):
        return P @ self.M.T

    def inverse_apply(self, P):
        return P @ inv_sl2(self.M).T

    def jac(self, P):
        return np.broadcast_to(self.M, P.shape[:-1] + (2, 2)).copy()

    def offset(self, P, Z):
        return Z @ self.M.T

    def inv_offset(self, Q, Z):
        return Z @ inv_sl2(self.M).T

    def inverse(self):
        return Linear(tuple(map(tuple, inv_sl2(self.M))))

    def to_json(self):
        return {"type": "linear", "matrix": [list(r) for r in self.matrix]}


@dataclass(frozen=True)
class HShear(Step):
    """(x, y) -> (x + h(y), y)."""

    h: TrigPoly

    @property
    def d1(self) -> float:
        return _shear_norm(self.h.sup(1))

    @property
    def d2(self) -> float:
        return self.h.sup(2)

    def apply(self, P):
        out = P.copy()
        out[..., 0] = P[..., 0] + self.h.value(P[..., 1])
        return out

    def inverse_apply(self, P):
        out = P.copy()
        out[..., 0] = P[..., 0] - self.h.value(P[..., 1])
        return out

    def jac(self, P):
        J = np.zeros(P.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        J[..., 0, 1] = self.h.d1(P[..., 1])
        return J

    def offset(self, P, Z):
        out = Z.copy()
        out[..., 0] = Z[..., 0] + self.h.diff(P[..., 1], Z[..., 1])
        return out

    def inv_offset(self, Q, Z):
        out = Z.copy()
        out[..., 0] = Z[..., 0] - self.h.diff(Q[..., 1], Z[..., 1])
        return out

    def inverse(self):
        return HShear(TrigPoly(tuple((k, -a, -b) for k, a, b in self.h.terms)))

    def to_json(self):
        return {"type": "hshear", "terms": self.h.to_json()}


@dataclass(frozen=True)
class VShear(Step):
    """(x, y) -> (x, y + g(x))."""

    g: TrigPoly

    @property
    def d1(self) -> float:
        return _shear_norm(self.g.sup(1))

    @property
    def d2(self) -> float:
        return self.g.sup(2)

    def apply(self, P):
        out = P.copy()
        out[..., 1] = P[..., 1] + self.g.value(P[..., 0])
        return out

    def inverse_apply(self, P):
        out = P.copy()
        out[..., 1] = P[..., 1] - self.g.value(P[..., 0])
        return out

    def jac(self, P):
        J = np.zeros(P.shape[:-1] + (2, 2))
        J[..., 0, 0] = 1.0
        J[..., 1, 1] = 1.0
        J[..., 1, 0] = self.g.d1(P[..., 0])
        return J

    def offset(self, P, Z):
        out = Z.copy()
        out[..., 1] = Z[..., 1] + self.g.diff(P[..., 0], Z[..., 0])
        return out

    def inv_offset(self, Q, Z):
        out = Z.copy()
        out[..., 1] = Z[..., 1] - self.g.diff(Q[..., 0], Z[..., 0])
        return out

    def inverse(self):
        return VShear(TrigPoly(tuple((k, -a, -b) for k, a, b in self.g.terms)))

    def to_json(self):
        return {"type": "vshear", "terms": self.g.to_json()}


def step_from_json(d: dict) -> Step:
    if not isinstance(d, dict) or "type" not in d:
        raise ValidationError("step must be an object with a 'type' field")
    kind = d["type"]
    if kind == "linear":
        return Linear(tuple(map(tuple, d["matrix"])))
    if kind in ("hshear", "vshear"):
        poly = TrigPoly(tuple(tuple(t) for t in d.get("terms", [])))
        return HShear(poly) if kind == "hshear" else VShear(poly)
    raise ValidationError(f"unknown step type {kind!r}")


# ---------------------------------------------------------------------------
# maps and tuples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapSpec:
    """Composite map; steps are applied in list order."""

    steps: tuple

    def __post_init__(self):
        if not self.steps:
            raise ValidationError("a map needs at least one step")
        object.__setattr__(self, "steps", tuple(self.steps))

    def apply(self, P, wrap: bool = True):
        P = np.asarray(P, dtype=float)
        for s in self.steps:
            P = s.apply(P)
        return np.mod(P, 1.0) if wrap else P

    def inverse_apply(self, P, wrap: bool = True):
        P = np.asarray(P, dtype=float)
        for s in reversed(self.steps):
            P = s.inverse_apply(P)
        return np.mod(P, 1.0) if wrap else P

    def apply_with_jac(self, P, wrap: bool = True):
        P = np.asarray(P, dtype=float)
        J = None
        for s in self.steps:
            Js = s.jac(P)
            J = Js if J is None else Js @ J
            P = s.apply(P)
        return (np.mod(P, 1.0) if wrap else P), J

    def jac(self, P):
        return self.apply_with_jac(P)[1]

    def offset(self, P, Z):
        """f(P + Z) - f(P) for small offsets Z."""
        P = np.asarray(P, dtype=float)
        Z = np.asarray(Z, dtype=float)
        for s in self.steps:
            Z = s.offset(P, Z)
            P = s.apply(P)
        return Z

    def inv_offset(self, Q, Z):
        """f^{-1}(Q + Z) - f^{-1}(Q) for small offsets Z."""
        Q = np.asarray(Q, dtype=float)
        Z = np.asarray(Z, dtype=float)
        for s in reversed(self.steps):
            Z = s.inv_offset(Q, Z)
            Q = s.inverse_apply(Q)
        return Z

    def inverse(self) -> "MapSpec":
        return MapSpec(tuple(s.inverse() for s in reversed(self.steps)))

    def bounds(self) -> tuple[float, float]:
        """(sup ||Df||, sup |D^2 f|) bounds composed along the steps."""
        D1, D2 = 1.0, 0.0
        for s in self.steps:
            D1, D2 = s.d1 * D1, s.d2 * D1 * D1 + s.d1 * D2
        return D1, D2

    def to_json(self):
        return {"steps": [s.to_json() for s in self.steps]}


def evaluate(f: MapSpec, p):
    """Image of a point (reduced mod 1) and the exact differential."""
    P = np.asarray(p, dtype=float)
    img, J = f.apply_with_jac(P)
    return img, J


@dataclass(frozen=True)
class MapTuple:
    maps: tuple
    c1_bound: float = field(default=0.0)
    c2_bound: float = field(default=0.0)
    spec: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def m(self) -> int:
        return len(self.maps)

    def inverse_maps(self) -> tuple:
        return tuple(f.inverse() for f in self.maps)

    def to_json(self) -> dict:
        if self.spec:
            return dict(self.spec)
        return {"custom": [f.to_json() for f in self.maps]}


def _validate_volume(f: MapSpec, lattice: int = 8):
    g = (np.arange(lattice) + 0.37) / lattice
    P = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    dets = det2(f.jac(P))
    if np.max(np.abs(dets - 1.0)) > 1e-12:
        raise ValidationError("map differential does not have determinant 1")


def build_tuple(maps: Sequence[MapSpec], spec: dict | None = None) -> MapTuple:
    maps = tuple(maps)
    if not maps:
        raise ValidationError("a tuple needs m >= 1 maps")
    for f in maps:
        _validate_volume(f)
    b = [f.bounds() for f in maps]
    c1 = max(x[0] for x in b)
    c2 = max(max(x) for x in b)
    return MapTuple(maps, c1, c2, spec or {})


CAT = ((2.0, 1.0), (1.0, 1.0))
CAT_T = ((1.0, 1.0), (1.0, 2.0))


def make_tuple(family: str, **params) -> MapTuple:
    """Named map ensembles: single_cat, cat_pair, cat_pair_shear, rotations, custom."""
    spec = {"family": family, "params": dict(params)}
    if family == "single_cat":
        return build_tuple([MapSpec((Linear(CAT),))], spec)
    if family == "cat_pair":
        return build_tuple([MapSpec((Linear(CAT),)), MapSpec((Linear(CAT_T),))], spec)
    if family == "cat_pair_shear":
        K = float(params.get("K", 0.1))
        h = TrigPoly(((1, K / TWO_PI, 0.0),))
        maps = [MapSpec((Linear(A), HShear(h))) for A in (CAT, CAT_T)]
        return build_tuple(maps, {"family": family, "params": {"K": K}})
    if family == "rotations":
        angles = params.get("angles", [0.3, 1.1])
        maps = []
        for a in angles:
            c, s = math.cos(a), math.sin(a)
            maps.append(MapSpec((Linear(((c, -s), (s, c))),)))
        return build_tuple(maps, {"family": family, "params": {"angles": list(map(float, angles))}})
    if family == "custom":
        items = params.get("maps", [])
        maps = [MapSpec(tuple(step_from_json(s) for s in it["steps"])) for it in items]
        return build_tuple(maps, {"custom": [f.to_json() for f in maps]})
    raise ValidationError(f"unknown family {family!r}")


def tuple_from_json(d: dict) -> MapTuple:
    """Parse {family, params} or {custom: [{steps: [...]}, ...]}."""
    if not isinstance(d, dict):
        raise ValidationError("tuple spec must be an object")
    if "custom" in d:
        return make_tuple("custom", maps=d["custom"])
    if "family" not in d:
        raise ValidationError("tuple spec needs 'family' or 'custom'")
    return make_tuple(d["family"], **(d.get("params") or {}))


def tuple_from_matrices(mats: Iterable) -> MapTuple:
    return build_tuple([MapSpec((Linear(tuple(map(tuple, np.asarray(A)))),)) for A in mats])


# ---------------------------------------------------------------------------
# orbits and cocycles
# ---------------------------------------------------------------------------

def orbit(tup: MapTuple, symbols, P, wrap: bool = True):
    """Points (n+1, ..., 2) and differentials (n, ..., 2, 2) along a word."""
    P = np.asarray(P, dtype=float)
    symbols = np.asarray(symbols, dtype=np.int64)
    pts = [P]
    jacs = []
    for s in symbols:
        P, J = tup.maps[s].apply_with_jac(P, wrap=wrap)
        pts.append(P)
        jacs.append(J)
    if jacs:
        return np.stack(pts), np.stack(jacs)
    return np.stack(pts), np.zeros((0,) + P.shape[:-1] + (2, 2))


def running_products(factors: np.ndarray):
    """Renormalized running products of factors (n, ..., 2, 2).

    Returns (products (n+1, ..., 2, 2), logscale (n+1, ...)) with
    products[k] * exp(logscale[k]) = factors[k-1] @ ... @ factors[0].
    """
    factors = np.asarray(factors, dtype=float)
    n = factors.shape[0]
    batch = factors.shape[1:-2]
    P = np.broadcast_to(np.eye(2), batch + (2, 2)).copy()
    ls = np.zeros(batch)
    prods = [P.copy()]
    scales = [ls.copy()]
    for k in range(n):
        P = factors[k] @ P
        big = np.max(np.abs(P), axis=(-2, -1))
        mask = big > RENORM_THRESHOLD
        if np.any(mask):
            scale = np.where(mask, big, 1.0)
            P = P / scale[..., None, None]
            ls = ls + np.where(mask, np.log(scale), 0.0)
        prods.append(P.copy())
        scales.append(ls.copy())
    return np.stack(prods), np.stack(scales)


@dataclass
class CocycleTrace:
    points: np.ndarray  # (n+1, 2)
    symbols: np.ndarray  # (n,)
    factors: np.ndarray  # (n, 2, 2); factors[k] = A_{k+1}
    products: np.ndarray  # (n+1, 2, 2) renormalized
    logscale: np.ndarray  # (n+1,)
    lognorms: np.ndarray  # (n+1,) ln ||A^k||

    @property
    def n(self) -> int:
        return len(self.factors)

    def product(self, k: int | None = None) -> np.ndarray:
        """True product A^k (may overflow for huge k; use products/logscale instead)."""
        k = self.n if k is None else k
        return self.products[k] * math.exp(self.logscale[k])

    def subproduct(self, i: int, k: int):
        """A^k_i = A_{i+k} ... A_{i+1} as (renormalized matrix, logscale)."""
        if i < 0 or k < 0 or i + k > self.n:
            raise IndexError("sub-product outside the trace")
        prods, ls = running_products(self.factors[i:i + k])
        return prods[-1], float(ls[-1])


def compose_word(tup: MapTuple, word, n: int, p) -> CocycleTrace:
    if n < 0:
        raise ValidationError("n must be >= 0")
    syms = as_symbols(word, n, tup.m)
    pts, jacs = orbit(tup, syms, np.asarray(p, dtype=float))
    prods, ls = running_products(jacs)
    lognorms = np.log(norm2(prods)) + ls
    return CocycleTrace(pts, syms, jacs, prods, ls, lognorms)


def orbit_words(tup: MapTuple, symbols, P, wrap: bool = True):
    """Orbits of many points, each under its own word.

    symbols: (W, n) integer array; P: (W, 2).  Returns points (n+1, W, 2)
    and differentials (n, W, 2, 2).
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    P = np.array(P, dtype=float)
    W, n = symbols.shape
    pts = np.empty((n + 1, W, 2))
    jacs = np.empty((n, W, 2, 2))
    pts[0] = P
    for k in range(n):
        col = symbols[:, k]
        for s in range(tup.m):
            idx = np.nonzero(col == s)[0]
            if len(idx) == 0:
                continue
            img, J = tup.maps[s].apply_with_jac(P[idx], wrap=wrap)
            P[idx] = img
            jacs[k, idx] = J
        pts[k + 1] = P
    return pts, jacs


def apply_words(tup: MapTuple, symbols, P, wrap: bool = True):
    """Images only (no differentials) of points under per-point words."""
    symbols = np.asarray(symbols, dtype=np.int64)
    P = np.array(P, dtype=float)
    for k in range(symbols.shape[1]):
        col = symbols[:, k]
        for s in range(tup.m):
            idx = np.nonzero(col == s)[0]
            if len(idx):
                P[idx] = tup.maps[s].apply(P[idx], wrap=wrap)
    return P
