"""Coupling of two standard pairs along fake stable leaves.

Mass is tracked on pieces of curves (standard pairs with unit weight).  A
local coupling cuts the first curve into bins, slides them along fake stable
leaves onto the second curve and matches equal amounts of mass; recovery
sets aside equal amounts of good mass on both sides; the loop alternates
the two and records how much mass is still uncoupled at each time.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.spatial import cKDTree

from .cocycle import split_constant_batch, split_trajectories
from .fitting import LineFit, loglinear_fit
from .pairs import PushParams, StandardPair, _insert_cuts, goodness, push_step, restrict
from .pesin import CurveChart, fake_stable_leaves, leaf_crossing
from .rds_core import MapTuple, ValidationError, angle_dist, as_symbols, orbit, torus_dist, word_stream

CONE_CENTERS = (0.0, math.pi / 3, 2 * math.pi / 3)
CONE_HALF = math.pi / 6


@dataclass(frozen=True)
class ConfigurationParams:
    C: float = 2.5          # goodness bound for both curves
    delta: float = 0.03     # witnesses at least this far (arc length) from the ends
    upsilon: float = 0.03   # witness distance
    tau: float = 1.0
    theta0: float = 0.05    # cone transversality margin

    def __post_init__(self):
        if not (0 < self.upsilon <= self.tau * self.delta):
            raise ValidationError("configuration needs 0 < upsilon <= tau * delta")


@dataclass(frozen=True)
class CouplingParams:
    # tempered sets: forward splitting constants, calibrated on cat_pair_shear(0.1)
    C: float = 3.0
    lam: float = 0.5
    eps: float = 0.05
    # fake coupling: start N, leaf order (local horizon), mass floor, rate
    N: int = 16
    n_loc: int = 20
    a0: float = 0.8
    margin: float = 0.05
    eta_hat: float = 0.15   # below min(eta/2, 1.99 lam' (1-sigma)^2 alpha/2) with eta = 0.8, lam' = 0.45
    sigma: float = 0.1
    eta: float = 0.8        # holonomy Jacobian decay rate measured on cat_pair_shear(0.1)
    pad0: float = 0.01
    trim_K1: float = 0.01
    bins: int = 16
    radius: float = 0.25    # half-length of the coupled window on the first curve
    leaf_delta: float = 0.06
    leaf_mesh: float = 2e-3
    # recovery and loop
    C0: float = 2.5
    Delta: int = 2
    q: int = 1
    N0: int = 4
    horizon: int = 40
    cap: int = 32
    max_pairs: int = 32
    mesh: float = 2e-3
    ell_max: float = 0.5
    lam_prime: float = 0.45
    contract_C: float = 0.25
    config: ConfigurationParams = field(default_factory=ConfigurationParams)

    @property
    def block(self) -> int:
        return self.Delta * (self.q + 1)

    @property
    def push(self) -> PushParams:
        return PushParams(mesh=self.mesh, ell_max=self.ell_max)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# configurations
# ---------------------------------------------------------------------------

@dataclass
class Configuration:
    found: bool
    reason: str | None = None
    s1: float = float("nan")
    s2: float = float("nan")
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    distance: float = float("nan")
    cone: int = -1


def _tangent_angle(pair: StandardPair, s: float) -> float:
    tg = pair.tangents()
    v = np.array([np.interp(s, pair.s, tg[:, 0]), np.interp(s, pair.s, tg[:, 1])])
    return math.atan2(v[1], v[0])


def detect_configuration(p1: StandardPair, p2: StandardPair,
                         params: ConfigurationParams = ConfigurationParams(),
                         R1: float | None = None, R2: float | None = None) -> Configuration:
    """Witnesses x on p1, y on p2 within upsilon, delta-interior, C-regular, with a shared cone.

    R1, R2 may pass precomputed goodness values.
    """
    for p, R in ((p1, R1), (p2, R2)):
        if p.K < 3 or (goodness(p).R if R is None else R) > params.C:
            return Configuration(False, "regularity")
    s1, s2 = p1.s, p2.s
    i1 = np.nonzero((s1 >= params.delta) & (s1 <= s1[-1] - params.delta))[0]
    i2 = np.nonzero((s2 >= params.delta) & (s2 <= s2[-1] - params.delta))[0]
    if len(i1) == 0 or len(i2) == 0:
        return Configuration(False, "interior")
    tree = cKDTree(np.mod(p2.nodes[i2], 1.0), boxsize=1.0)
    D, J = tree.query(np.mod(p1.nodes[i1], 1.0), k=1)
    a = int(np.argmin(D))
    d = float(D[a])
    if not d < params.upsilon:
        return Configuration(False, "proximity", distance=d)
    j1, j2 = int(i1[a]), int(i2[J[a]])
    t1 = _tangent_angle(p1, s1[j1])
    t2 = _tangent_angle(p2, s2[j2])
    need = CONE_HALF + params.theta0
    score = [min(angle_dist(c, t1), angle_dist(c, t2)) for c in CONE_CENTERS]
    cone = int(np.argmax(score))
    if score[cone] < need:
        return Configuration(False, "transversality", distance=d)
    return Configuration(True, None, float(s1[j1]), float(s2[j2]), np.mod(p1.nodes[j1], 1.0),
                         np.mod(p2.nodes[j2], 1.0), d, cone)


# ---------------------------------------------------------------------------
# local coupling
# ---------------------------------------------------------------------------

@dataclass
class FakeCouplingState:
    """Bin fractions of the fake coupled densities for n = N .. n_loc.

    frac[n - N, j] is rho^1_n / rho^1 on bin j (0 once dropped); the second
    curve carries the holonomy image of the same bin masses.
    """
    N: int
    frac: np.ndarray
    mass1: np.ndarray      # bin masses on the first curve
    image_edges: np.ndarray  # arc length on the second curve of each bin edge
    active: np.ndarray     # (n, bins) bool
    b0: float
    eta_hat: float

    def floor(self, n: int) -> float:
        i = np.arange(self.N + 1, n + 1)
        return self.b0 * float(np.prod(1.0 - np.exp(-i * self.eta_hat)))

    def floor_violations(self) -> int:
        bad = 0
        for r, n in enumerate(range(self.N, self.N + len(self.frac))):
            a = self.active[r]
            bad += int(np.sum(self.frac[r][a] < self.floor(n) * (1 - 1e-12)))
        return bad


@dataclass
class CouplingRecord:
    steps: list = field(default_factory=list)    # dicts n, coupled_mass, stopped_mass, residual_mass
    stopped1: list = field(default_factory=list)  # per step, first side
    stopped2: list = field(default_factory=list)
    blocks: list = field(default_factory=list)    # (bin range on p1, range on p2, mass)
    stop_times: np.ndarray | None = None          # per bin, first n of dropping (n_loc+1 if kept)
    samples: list = field(default_factory=list)   # (x, ux)
    initial: float = 0.0
    coupled_pair_masses: tuple = (0.0, 0.0)

    def conservation_error(self) -> float:
        if not self.steps:
            return 0.0
        return max(abs(r["coupled_mass"] + r["stopped_mass"] + r["residual_mass"] - self.initial)
                   for r in self.steps)

    def stop_mismatch(self) -> float:
        if not self.stopped1:
            return 0.0
        return float(np.max(np.abs(np.asarray(self.stopped1) - np.asarray(self.stopped2))))


@dataclass
class LocalCoupling:
    record: CouplingRecord
    rest1: list
    rest2: list
    coupled: float
    state: FakeCouplingState | None
    a_eff: float = 0.0
    reason: str | None = None


def _refine(pair: StandardPair, h: float) -> StandardPair:
    """Insert nodes along the polyline so that spacing is <= h (geometry unchanged)."""
    L = pair.length
    K = int(math.ceil(L / h))
    if pair.seg.max() <= h:
        return pair
    cuts = L * np.arange(1, K) / K
    _, nodes, lr = _insert_cuts(pair, cuts)
    return StandardPair(nodes, lr)


def _chart_for(pair: StandardPair, s0: float, half: float):
    """Graph chart of pair near arc length s0 and the map chart-u -> arc length."""
    lo, hi = max(0.0, s0 - half), min(pair.length, s0 + half)
    sub = restrict(pair, lo, hi)
    origin = np.mod(pair.point_at(s0)[0], 1.0)
    t = _tangent_angle(pair, s0)
    e1 = np.array([math.cos(t), math.sin(t)])
    frame = np.column_stack([e1, [-e1[1], e1[0]]])
    d = sub.nodes - pair.point_at(s0)[0]
    loc = d @ frame
    if np.any(np.diff(loc[:, 0]) <= 0):
        return None, None
    chart = CurveChart(loc[:, 0], loc[:, 1], None, origin, frame)
    arc = lo + sub.s
    return chart, (loc[:, 0], arc)


def _forward_tempered(tup, syms, P, params: CouplingParams, cone: int):
    """(n_loc - N + 1, points) mask of (C, lam, eps)-tempered splittings in the cone."""
    _, jacs = orbit(tup, syms, P)
    out = []
    for n in range(params.N, params.n_loc + 1):
        tr = split_trajectories(jacs[:n])
        req = split_constant_batch(tr, params.lam, params.eps)
        inc = angle_dist(tr.theta_s, CONE_CENTERS[cone]) <= CONE_HALF
        out.append((req <= params.C) & inc & ~tr.degenerate)
    return np.array(out)


def local_couple(tup: MapTuple, p1: StandardPair, p2: StandardPair, word,
                 params: CouplingParams = CouplingParams(), conf: Configuration | None = None,
                 t0: int = 0) -> LocalCoupling:
    """Couple equal masses of p1 and p2 along fake stable leaves of order n_loc.

    ``word`` gives the symbols from the current time on.  Returns the coupled
    mass, the uncoupled remainders of both curves, and a per-step ledger.
    """
    if conf is None:
        conf = detect_configuration(p1, p2, params.config)
    if not conf.found:
        raise ValidationError(f"configuration invalid ({conf.reason})")
    m1, m2 = p1.mass, p2.mass
    if abs(m1 - m2) > 1e-10 * max(m1, m2):
        raise ValidationError("local coupling needs equal masses")
    rec = CouplingRecord(initial=m1)

    def fail(reason):
        return LocalCoupling(rec, [p1], [p2], 0.0, None, 0.0, reason)

    B, r, N, nl = params.bins, params.radius, params.N, params.n_loc
    h = min(params.mesh, min(2 * r, p1.length) / (3 * B))
    p1 = _refine(p1, h)
    p2 = _refine(p2, h)
    s1 = conf.s1
    lo1 = max(s1 - r, 2 * params.mesh)
    hi1 = min(s1 + r, p1.length - 2 * params.mesh)
    if not hi1 > lo1:
        return fail("window")
    edges = lo1 + (hi1 - lo1) * np.arange(B + 1) / B
    mids = 0.5 * (edges[1:] + edges[:-1])
    ts = np.concatenate([edges, mids])
    P = np.mod(p1.point_at(ts)[0], 1.0)
    syms = as_symbols(word, nl, tup.m)

    # tempered sets on the first curve
    temp = _forward_tempered(tup, syms, P, params, conf.cone)
    ok_bin = temp[:, :B] & temp[:, 1:B + 1] & temp[:, B + 1:]

    # holonomy of bin edges and midpoints onto the second curve
    chart, uu_arc = _chart_for(p2, conf.s2, 2 * (hi1 - lo1) + 2 * params.config.upsilon)
    if chart is None:
        return fail("chart")
    uu, arc = uu_arc
    leaves = fake_stable_leaves(tup, syms, P, nl, params.leaf_delta, mesh=params.leaf_mesh)
    tg = np.array([_tangent_angle(p1, t) for t in ts])
    img = np.full(len(ts), np.nan)
    hit_pts = np.full((len(ts), 2), np.nan)
    for i, lf in enumerate(leaves):
        if angle_dist(lf.tangent, tg[i]) < params.config.theta0:
            continue
        hit = leaf_crossing(lf, chart)
        if hit is not None:
            img[i] = np.interp(hit[1], uu, arc)
            hit_pts[i] = np.mod(lf.point(hit[0]), 1.0)
    hit_bin = ~np.isnan(img[:B]) & ~np.isnan(img[1:B + 1]) & ~np.isnan(img[B + 1:])
    engaged = hit_bin & ok_bin[0]
    if not np.any(engaged):
        return fail("no tempered bins")
    # one contiguous run of engaged bins around the witness
    j0 = int(np.argmin(np.abs(mids - s1)))
    if not engaged[j0]:
        j0 = int(np.nonzero(engaged)[0][np.argmin(np.abs(np.nonzero(engaged)[0] - j0))])
    a = j0
    while a > 0 and engaged[a - 1]:
        a -= 1
    b = j0
    while b < B - 1 and engaged[b + 1]:
        b += 1
    run = np.arange(a, b + 1)
    e_img = img[a:b + 2]
    dimg = np.diff(e_img)
    if not (np.all(dimg > 0) or np.all(dimg < 0)):
        return fail("holonomy not monotone")

    # stopping times: first failure, padded, edge-trimmed
    nb = len(run)
    fail_n = np.full(nb, nl + 1)
    for row, n in enumerate(range(N, nl + 1)):
        bad = ~ok_bin[row, run] & (fail_n > n)
        fail_n[bad] = np.minimum(fail_n[bad], n)
        if n > N:
            pad = params.pad0 * math.exp(-(1 + params.sigma) * params.eta * n)
            for i in np.nonzero(fail_n == n)[0]:
                near = np.abs(mids[run] - mids[run[i]]) <= pad
                fail_n[near] = np.minimum(fail_n[near], n)
            w = params.trim_K1 * math.exp(-4 * math.log(max(tup.c2_bound, 1.0)) * n)
            alive = fail_n > n
            if np.any(alive) and w > 0:
                idx = np.nonzero(alive)[0]
                lo, hi = edges[run[idx[0]]], edges[run[idx[-1]] + 1]
                trim = alive & ((mids[run] - lo < w) | (hi - mids[run] < w))
                fail_n[trim] = n
    rec.stop_times = fail_n

    # bin masses on both curves
    M1 = np.array([restrict(p1, edges[j], edges[j + 1]).mass for j in run])
    lo2, hi2 = (e_img[0], e_img[-1]) if dimg[0] > 0 else (e_img[-1], e_img[0])
    if lo2 <= 0 or hi2 >= p2.length:
        return fail("image outside")

    # pushforward density of rho1 on the second curve: g = rho1(H^-1 y) |dH^-1/dy|
    order = np.argsort(e_img)
    inv = PchipInterpolator(e_img[order], edges[a:b + 2][order])
    sub2 = restrict(p2, lo2, hi2)
    y = lo2 + sub2.s
    src = inv(y)
    g = np.interp(src, p1.s, p1.rho) * np.abs(inv(y, 1))
    ratio = float(np.min(sub2.rho / g))
    a_eff = min(params.a0, (1 - params.margin) * ratio)
    if a_eff <= 0:
        return fail("density floor")

    # density recursion
    steps = np.arange(N, nl + 1)
    decay = np.concatenate([[1.0], np.cumprod(1.0 - np.exp(-steps[1:] * params.eta_hat))])
    frac = a_eff * decay[:, None] * (fail_n[None, :] > steps[:, None])
    active = fail_n[None, :] > steps[:, None]
    engaged_mass = a_eff * float(M1.sum())
    stopped_cum = 0.0
    prev = frac[0]
    for row, n in enumerate(steps):
        cur = frac[row]
        st = float(np.sum((prev - cur) * M1)) if row else 0.0
        stopped_cum += st
        rec.stopped1.append(st)
        rec.stopped2.append(st)  # the second side carries the same bin masses
        rec.steps.append({"n": int(n), "coupled_mass": float(np.sum(cur * M1)),
                          "stopped_mass": stopped_cum, "residual_mass": m1 - engaged_mass})
        prev = cur
    state = FakeCouplingState(N, frac, M1, e_img, active, a_eff, params.eta_hat)
    c_fin = frac[-1]
    surv = c_fin > 0
    if not np.any(surv):
        return LocalCoupling(rec, [p1], [p2], 0.0, state, a_eff, "all dropped")

    # remainders: cut at runs of survivors; survivors share one fraction
    c = float(c_fin[surv][0])
    runs = _runs(surv)
    cuts1 = sorted({float(edges[a + i]) for i0, i1 in runs for i in (i0, i1 + 1)})
    cuts1 = [x for x in cuts1 if 0 < x < p1.length]
    pieces = _cut(p1, cuts1)
    bounds = [0.0] + cuts1 + [p1.length]
    rest1, coupled1 = [], 0.0
    for q, lo, hi in zip(pieces, bounds[:-1], bounds[1:]):
        mid = 0.5 * (lo + hi)
        jb = int(np.searchsorted(edges, mid)) - 1 - a
        if 0 <= jb < nb and surv[jb]:
            coupled1 += c * q.mass
            rest1.append(q.scaled(1.0 - c))
        else:
            rest1.append(q)
    cuts2 = sorted({float(img[a + i]) for i0, i1 in runs for i in (i0, i1 + 1)})
    pieces = _cut(p2, cuts2)
    bounds = [0.0] + cuts2 + [p2.length]
    rest2 = []
    for q, lo, hi in zip(pieces, bounds[:-1], bounds[1:]):
        mid = 0.5 * (lo + hi)
        src_mid = float(inv(mid)) if lo2 <= mid <= hi2 else -1.0
        jb = int(np.searchsorted(edges, src_mid)) - 1 - a
        if lo2 <= mid <= hi2 and 0 <= jb < nb and surv[jb]:
            yq = lo + q.s
            gq = np.interp(inv(yq), p1.s, p1.rho) * np.abs(inv(yq, 1))
            src_lo, src_hi = sorted((float(inv(lo)), float(inv(hi))))
            target = c * restrict(p1, src_lo, src_hi).mass
            tq = StandardPair(q.nodes, np.log(gq))
            gq = gq * (target / tq.mass)
            left = q.rho - gq
            if np.any(left <= 0):
                return fail("density floor")
            rest2.append(StandardPair(q.nodes, np.log(left)))
        else:
            rest2.append(q)
    m_rest2 = sum(q.mass for q in rest2)
    coupled2 = m2 - m_rest2
    rec.blocks.append(((float(edges[a]), float(edges[b + 1])), (float(lo2), float(hi2)), coupled1))
    # the partner of a bin midpoint is where its leaf meets the second curve
    rec.samples = [(P[B + 1 + run[i]].copy(), hit_pts[B + 1 + run[i]].copy())
                   for i in range(nb) if surv[i]]
    rec.coupled_pair_masses = (coupled1, coupled2)
    return LocalCoupling(rec, [x.recentered() for x in rest1], [x.recentered() for x in rest2],
                         coupled1, state, a_eff)


def _runs(mask):
    out, i = [], 0
    while i < len(mask):
        if mask[i]:
            j = i
            while j + 1 < len(mask) and mask[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def _cut(pair: StandardPair, cuts) -> list:
    cuts = [float(x) for x in cuts if 0 < x < pair.length]
    if not cuts:
        return [pair]
    from .pairs import subdivide
    return subdivide(pair, cuts=cuts).pairs


# ---------------------------------------------------------------------------
# recovery and the coupling loop
# ---------------------------------------------------------------------------

def _push_all(tup: MapTuple, sym: int, pieces: list, pp: PushParams) -> list:
    f = tup.maps[sym]
    out = []
    for p in pieces:
        out.extend(push_step(f, p, pp))
    return out


def _mass(pieces) -> float:
    return float(sum(p.mass for p in pieces))


def resample(pieces: list, cap: int, rng: np.random.Generator) -> list:
    """Systematic resampling down to ``cap`` pieces; total mass is kept exactly.

    Each chosen piece is rescaled to carry total/cap.
    """
    if len(pieces) <= cap:
        return pieces
    m = np.array([p.mass for p in pieces])
    total = float(m.sum())
    cdf = np.cumsum(m) / total
    u = (rng.uniform() + np.arange(cap)) / cap
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(pieces) - 1)
    out = [pieces[i].scaled(total / cap / m[i]) for i in idx]
    # absorb rounding so the group mass is unchanged
    err = total - _mass(out)
    out[-1] = out[-1].scaled(1.0 + err / out[-1].mass)
    return out


def _take_good(pieces: list, C0: float):
    good, bad = [], []
    for p in pieces:
        (good if p.K >= 3 and goodness(p).R <= C0 else bad).append(p)
    return good, bad


def _stop_amount(good: list, amount: float):
    """Split good pieces into a stopped part of exactly ``amount`` and the rest."""
    stopped, rest = [], []
    need = amount
    for p in good:
        m = p.mass
        if need <= 0:
            rest.append(p)
        elif m <= need:
            stopped.append(p)
            need -= m
        else:
            f = need / m
            stopped.append(p.scaled(f))
            rest.append(p.scaled(1.0 - f))
            need = 0.0
    return stopped, rest


def stop_equal_good(F1: list, F2: list, C0: float):
    """Set aside equal masses of C0-good pieces on both sides."""
    g1, b1 = _take_good(F1, C0)
    g2, b2 = _take_good(F2, C0)
    amount = min(_mass(g1), _mass(g2))
    s1, r1 = _stop_amount(g1, amount)
    s2, r2 = _stop_amount(g2, amount)
    return s1, s2, b1 + r1, b2 + r2, amount


@dataclass
class RecoveryRecord:
    stopped: list    # per step, mass stopped on each side (equal)
    residual: list   # per step, remaining mass on the first side
    blocks1: list
    blocks2: list
    rest1: list
    rest2: list

    def block_goodness(self, alpha: float = 0.5) -> list:
        return [goodness(p, alpha).R for p in self.blocks1 + self.blocks2]


def coupled_recovery(tup: MapTuple, F1: list, F2: list, word, params: CouplingParams = CouplingParams(),
                     blocks: int = 1, seed: int = 0) -> RecoveryRecord:
    """Push both families through blocks of Delta (q+1) steps.

    In the last Delta steps of each block the C0-good mass is stopped in
    equal amounts on both sides; the rest is carried forward.
    """
    if abs(_mass(F1) - _mass(F2)) > 1e-10 * max(_mass(F1), 1e-300):
        raise ValidationError("coupled recovery needs equal masses")
    L = params.block
    syms = as_symbols(word, blocks * L, tup.m)
    rng = np.random.default_rng([seed, 7])
    stopped, residual, B1, B2 = [], [], [], []
    for t, s in enumerate(syms):
        F1 = resample(_push_all(tup, int(s), F1, params.push), params.cap, rng)
        F2 = resample(_push_all(tup, int(s), F2, params.push), params.cap, rng)
        amt = 0.0
        if t % L >= params.Delta * params.q:
            s1, s2, F1, F2, amt = stop_equal_good(F1, F2, params.C0)
            B1.extend(s1)
            B2.extend(s2)
        stopped.append(amt)
        residual.append(_mass(F1))
    return RecoveryRecord(stopped, residual, B1, B2, F1, F2)


@dataclass
class CouplingRun:
    stream: int
    n: np.ndarray
    residual: np.ndarray   # uncoupled mass not set aside as recovered
    stopped: np.ndarray    # uncoupled mass in recovered blocks
    coupled: np.ndarray    # cumulative coupled mass
    initial: float
    attempts: list         # (time, uncoupled before, coupled, pairs matched, recovered pool)
    samples: list          # (x, ux, T)
    side_mismatch: float
    partial: bool

    @property
    def survival(self) -> np.ndarray:
        return (self.residual + self.stopped) / self.initial


def _match_pieces(S1: list, S2: list, params: CouplingParams):
    """Greedy nearest-witness pairing of recovered pieces."""
    cp = params.config
    R1 = [goodness(p).R if p.K >= 3 else math.inf for p in S1]
    R2 = [goodness(p).R if p.K >= 3 else math.inf for p in S2]
    nodes, owner = [], []
    for j, q in enumerate(S2):
        if R2[j] <= cp.C:
            sel = (q.s >= cp.delta) & (q.s <= q.length - cp.delta)
            nodes.append(np.mod(q.nodes[sel], 1.0))
            owner.append(np.full(int(sel.sum()), j))
    if not nodes or sum(len(o) for o in owner) == 0:
        return []
    tree = cKDTree(np.concatenate(nodes), boxsize=1.0)
    owner = np.concatenate(owner)
    near = {}
    for i, p in enumerate(S1):
        if R1[i] > cp.C:
            continue
        sel = (p.s >= cp.delta) & (p.s <= p.length - cp.delta)
        if not np.any(sel):
            continue
        D, J = tree.query(np.mod(p.nodes[sel], 1.0), k=1, distance_upper_bound=cp.upsilon)
        ok = np.isfinite(D)
        for d, j in zip(D[ok], owner[J[ok]]):
            key = (i, int(j))
            near[key] = min(near.get(key, math.inf), float(d))
    cand = sorted((d, i, j) for (i, j), d in near.items())
    used1, used2, out = set(), set(), []
    for d, i, j in cand:
        if i in used1 or j in used2:
            continue
        conf = detect_configuration(S1[i], S2[j], cp, R1[i], R2[j])
        if not conf.found:
            continue
        used1.add(i)
        used2.add(j)
        out.append((i, j, conf))
        if len(out) >= params.max_pairs:
            break
    return out


def run_coupling(tup: MapTuple, p1: StandardPair, p2: StandardPair, seed: int, stream: int = 0,
                 params: CouplingParams = CouplingParams()) -> CouplingRun:
    """Alternate pushing, recovery, precoupling and local coupling along one word."""
    m0 = p1.mass
    if abs(m0 - p2.mass) > 1e-10 * m0:
        raise ValidationError("run_coupling needs equal masses")
    ws = word_stream(seed, stream, tup.m)
    H = params.horizon
    syms = ws.symbols(H + params.n_loc + 1)
    rng = np.random.default_rng([seed, stream])
    F1, F2, S1, S2 = [p1], [p2], [], []
    coupled = 0.0
    rows_n, rows_r, rows_s, rows_c = [0], [m0], [0.0], [0.0]
    attempts, samples = [], []
    mismatch = 0.0
    for t in range(H):
        if t >= params.N0 and t % params.block == 0 and S1 and S2:
            before = _mass(F1) + _mass(S1)
            pool = _mass(S1)
            got = 0.0
            pairs = _match_pieces(S1, S2, params)
            drop1, drop2 = set(), set()
            for i, j, conf in pairs:
                a, b = S1[i], S2[j]
                ma, mb = a.mass, b.mass
                # equalize masses by a vertical split of the heavier piece
                if ma > mb:
                    a, extra = a.scaled(mb / ma), a.scaled(1.0 - mb / ma)
                    F1.append(extra)
                elif mb > ma:
                    b, extra = b.scaled(ma / mb), b.scaled(1.0 - ma / mb)
                    F2.append(extra)
                lc = local_couple(tup, a, b, syms[t:], params, conf, t0=t)
                F1.extend(lc.rest1)
                F2.extend(lc.rest2)
                drop1.add(i)
                drop2.add(j)
                if lc.coupled > 0:
                    got += lc.coupled
                    samples.extend((x, ux, t) for x, ux in lc.record.samples)
            S1 = [p for k, p in enumerate(S1) if k not in drop1]
            S2 = [p for k, p in enumerate(S2) if k not in drop2]
            coupled += got
            attempts.append((t, before, got, len(pairs), pool))
        s = int(syms[t])
        F1 = resample(_push_all(tup, s, F1, params.push), params.cap, rng)
        F2 = resample(_push_all(tup, s, F2, params.push), params.cap, rng)
        S1 = resample(_push_all(tup, s, S1, params.push), params.cap, rng)
        S2 = resample(_push_all(tup, s, S2, params.push), params.cap, rng)
        if (t + 1) % params.block == 0:
            a1, a2, F1, F2, _ = stop_equal_good(F1, F2, params.C0)
            S1.extend(a1)
            S2.extend(a2)
        u1 = _mass(F1) + _mass(S1)
        u2 = _mass(F2) + _mass(S2)
        mismatch = max(mismatch, abs(u1 - u2))
        rows_n.append(t + 1)
        rows_r.append(_mass(F1))
        rows_s.append(_mass(S1))
        rows_c.append(coupled)
    res = np.array(rows_r)
    st = np.array(rows_s)
    partial = bool(res[-1] + st[-1] > 1e-4 * m0)
    return CouplingRun(stream, np.array(rows_n), res, st, np.array(rows_c), m0, attempts, samples,
                       mismatch, partial)


def _run_one(args):
    tup, p1, p2, seed, stream, params = args
    return run_coupling(tup, p1, p2, seed, stream, params)


def worker_count(default: int | None = None) -> int:
    env = os.environ.get("RDSLAB_THREADS")
    if env:
        return max(1, int(env))
    return default or os.cpu_count() or 1


def run_coupling_ensemble(tup: MapTuple, p1: StandardPair, p2: StandardPair, seed: int, streams,
                          params: CouplingParams = CouplingParams(), workers: int | None = None) -> list:
    """One run per stream; results are ordered by stream whatever the worker count."""
    streams = [int(s) for s in streams]
    workers = worker_count(workers)
    jobs = [(tup, p1, p2, seed, s, params) for s in streams]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass
class CouplingSummary:
    n: np.ndarray
    survival: np.ndarray      # mean P(T > n) over words
    p: float                  # smallest per-period coupled fraction of the mean curve
    envelope_ok: bool
    tail_fit: LineFit
    contraction_violations: float
    samples: int


def contraction_violations(tup: MapTuple, runs: list, seed: int, params: CouplingParams) -> tuple:
    """Fraction of coupled samples with d(f^k x, f^k Ux) > C e^{-lam' k} for some k <= n_loc."""
    bad = tot = 0
    for r in runs:
        if not r.samples:
            continue
        syms = word_stream(seed, r.stream, tup.m).symbols(params.horizon + params.n_loc + 1)
        for x, ux, T in r.samples:
            w = syms[T:T + params.n_loc]
            px, _ = orbit(tup, w, x)
            pu, _ = orbit(tup, w, ux)
            d = torus_dist(px, pu)
            k = np.arange(len(d))
            tot += 1
            bad += int(np.any(d > params.contract_C * np.exp(-params.lam_prime * k)))
    return (bad / tot if tot else float("nan")), tot


def summarize(tup: MapTuple, runs: list, seed: int, params: CouplingParams) -> CouplingSummary:
    n = runs[0].n
    surv = np.mean([r.survival for r in runs], axis=0)
    period = params.block
    ks = n[::period]
    sk = surv[::period]
    ratios = sk[1:] / sk[:-1]
    start = int(np.searchsorted(ks, params.N0 + period))
    fr = 1.0 - ratios[start:] if len(ratios) > start else np.array([0.0])
    p = float(np.min(fr)) if len(fr) else 0.0
    kk = np.arange(len(sk))
    env_ok = bool(p > 0 and np.all(sk[start + 1:] / sk[start] <= (1 - p) ** (kk[start + 1:] - start) * (1 + 1e-12)))
    mask = n >= params.N0 + period
    fit = loglinear_fit(n[mask], surv[mask], floor=0.0)
    viol, tot = contraction_violations(tup, runs, seed, params)
    return CouplingSummary(n, surv, p, env_ok, fit, viol, tot)
