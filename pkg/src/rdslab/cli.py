"""Command line driver: `rdslab <experiment> --config c.json --out dir/`.

Every run writes its CSV/JSON/SVG artifacts, the fully resolved config and a
manifest of sha256 checksums.  Exit codes: 0 ok, 1 runtime failure, 2 config
error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .rds_core import (MapTuple, ValidationError, make_tuple, orbit, running_products, norm2,
                       unit, word_stream)

U64 = 1 << 64
MANIFEST = "manifest.json"
RESOLVED = "resolved_config.json"


class ConfigError(Exception):
    """Schema violation; carries the dotted path of the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

OBS_DEFAULT = [[1, 0, 1.0, 0.0], [0, 1, 1.0, 0.0], [1, 1, 1.0, 0.0]]

TUPLE_PARAMS = {
    "single_cat": {},
    "cat_pair": {},
    "cat_pair_shear": {"K": 0.1},
    "rotations": {"angles": [0.3, 1.1]},
    "custom": {"maps": []},
}

EXPERIMENTS = {
    "verify-expansion": {
        "tuple": "cat_pair", "streams": 0,
        "params": {"mode": "exact", "n0": None, "n0_max": 8, "G": 16, "D": 128,
                   "M": 2000, "delta": 0.05, "cap": 1000000, "extra_directions": []},
    },
    "tempered": {
        "tuple": "cat_pair", "streams": 100,
        "params": {"point": [0.1, 0.2], "n": 200, "lam": 0.5, "eps": 0.05, "C": 3.0, "C0": 0.0},
    },
    "stable-dist": {
        "tuple": "cat_pair", "streams": 2000,
        "params": {"point": [0.1, 0.2], "n": 30, "bins": 256},
    },
    "lyapunov": {
        "tuple": "cat_pair", "streams": 1,
        "params": {"point": [0.1, 0.2], "n": 80, "lam": 0.6, "eps": 0.05, "lambda_prime": 0.4},
    },
    "graph-transform": {
        "tuple": None, "streams": 0,
        "params": {"sigma1": 2.0, "sigma2": 0.5, "f1": [], "f2": [],
                   "phi": [[1.0, 0.15915494309189535]], "half": 0.5, "K": 201,
                   "iterations": 40, "alpha": 0.5},
    },
    "fake-stable": {
        "tuple": "cat_pair_shear", "streams": 1,
        "params": {"points": [[0.3, 0.4]], "n": 12, "delta": 0.05, "mesh": None},
    },
    "holonomy": {
        "tuple": "cat_pair_shear", "streams": 1,
        "params": {"point": [0.3, 0.4], "n": 8, "delta": 0.05, "offset": 0.02, "half": 0.02,
                   "sources": 7, "fd_step": 1e-4},
    },
    "recovery": {
        "tuple": "cat_pair_shear", "streams": 1000,
        "params": {"center": [0.3, 0.4], "angle": 2.124, "half": 0.2, "mesh": 2e-3,
                   "C": 2.0, "lam": 0.5, "eps": 0.05, "A": 2.0, "eps_prime": 0.1, "R": 0.0,
                   "horizon": 120, "with_goodness": 20},
    },
    "couple": {
        "tuple": "cat_pair_shear", "streams": 4,
        "params": {"p1": [[0.1, 0.25], [0.6, 0.25]], "p2": [[0.7, 0.2], [0.7, 0.7]],
                   "coupling": None},
    },
    "mixing": {
        "tuple": "cat_pair_shear", "streams": 50,
        "params": {"phi": OBS_DEFAULT, "psi": OBS_DEFAULT, "nmax": 12, "N": 512, "M": None,
                   "floor": 1e-12, "window": None},
    },
}


def _coupling_defaults() -> dict:
    from .coupling import CouplingParams
    return CouplingParams().to_json()


def _check(path: str, default, value):
    """Validate value against the type of its default; returns the merged value."""
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        out = copy.deepcopy(default)
        for k, v in value.items():
            if k not in default:
                raise ConfigError(f"{path}.{k}", "unknown field")
            out[k] = _check(f"{path}.{k}", default[k], v)
        return out
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(path, "expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
    return value


def resolve_config(kind: str | None, raw: dict, seed=None, streams=None) -> dict:
    """Merge defaults, the config file and command-line overrides."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "expected a JSON object")
    for k in raw:
        if k not in ("experiment", "tuple", "seed", "streams", "params"):
            raise ConfigError(k, "unknown field")
    file_kind = raw.get("experiment")
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        raise ConfigError("experiment", f"config is for {file_kind!r}, not {kind!r}")
    if kind not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment kind {kind!r}")
    base = EXPERIMENTS[kind]
    params_default = copy.deepcopy(base["params"])
    if kind == "couple":
        params_default["coupling"] = _coupling_defaults()
    params = _check("params", params_default, raw.get("params", {}))

    tup = None
    if base["tuple"] is not None:
        t = raw.get("tuple", {"family": base["tuple"]})
        if isinstance(t, str):
            t = {"family": t}
        if not isinstance(t, dict):
            raise ConfigError("tuple", "expected an object")
        for k in t:
            if k not in ("family", "params"):
                raise ConfigError(f"tuple.{k}", "unknown field")
        fam = t.get("family", base["tuple"])
        if fam not in TUPLE_PARAMS:
            raise ConfigError("tuple.family", f"unknown family {fam!r}")
        tup = {"family": fam, "params": _check("tuple.params", TUPLE_PARAMS[fam], t.get("params", {}))}
    elif "tuple" in raw:
        raise ConfigError("tuple", f"{kind} takes no map tuple")

    s = raw.get("seed", 0) if seed is None else seed
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < U64:
        raise ConfigError("seed", "expected an unsigned 64-bit integer")
    n = raw.get("streams", base["streams"]) if streams is None else streams
    if isinstance(n, bool) or not isinstance(n, int) or n < 0:
        raise ConfigError("streams", "expected a non-negative integer")
    return {"experiment": kind, "tuple": tup, "seed": int(s), "streams": int(n), "params": params}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def svg_plot(series, title: str = "", xlabel: str = "", ylabel: str = "", logy: bool = False,
             width: int = 480, height: int = 320) -> str:
    """Polyline plot of [(label, x, y), ...]; log10 y axis when logy."""
    pad = 48
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pts = []
    for label, x, y in series:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if logy:
            ok = y > 0
            x, y = x[ok], np.log10(y[ok])
        ok = np.isfinite(x) & np.isfinite(y)
        pts.append((label, x[ok], y[ok]))
    allx = np.concatenate([p[1] for p in pts]) if pts else np.zeros(0)
    ally = np.concatenate([p[2] for p in pts]) if pts else np.zeros(0)
    if len(allx) == 0:
        allx = ally = np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="11">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{("log10 " if logy else "") + ylabel}</text>',
           f'<text x="{pad}" y="{height - pad + 14}" font-size="10">{x0:.4g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="end">{x1:.4g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (label, x, y) in enumerate(pts):
        c = colors[i % len(colors)]
        poly = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{poly}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="10" fill="{c}" '
                   f'text-anchor="end">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


class RunWriter:
    """Single writer for one run directory; remembers every artifact."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _write(self, name: str, text: str):
        (self.out / name).write_text(text)
        if name not in self.files:
            self.files.append(name)

    def csv(self, name: str, header, rows):
        lines = [",".join(header)]
        lines.extend(",".join(fmt(v) for v in r) for r in rows)
        self._write(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj):
        self._write(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def svg(self, name: str, series, **kw):
        self._write(name, svg_plot(series, **kw))

    def manifest(self, cfg: dict, wall: float):
        arts = []
        for name in sorted(self.files):
            data = (self.out / name).read_bytes()
            arts.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        man = {"experiment": cfg["experiment"], "config_hash": config_hash(cfg),
               "version": __version__, "wall_time": wall, "artifacts": arts}
        (self.out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        return man


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def worker_count() -> int:
    env = os.environ.get("RDSLAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pmap(fn, jobs: list) -> list:
    """Ordered map over jobs; worker count only affects speed."""
    w = worker_count()
    if w <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(w, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


def build_tuple(cfg: dict) -> MapTuple:
    t = cfg["tuple"]
    return make_tuple(t["family"], **t["params"])


def _lognorms(tup, seed, stream, n, point):
    syms = word_stream(seed, stream, tup.m).symbols(n)
    _, jacs = orbit(tup, syms, np.asarray(point, dtype=float))
    prods, ls = running_products(jacs)
    L = np.log(norm2(prods)) + ls
    L[0] = 0.0
    return syms, jacs, L


def _need(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(path, msg)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_expansion(cfg, w: RunWriter) -> dict:
    from .expansion import eoa_exact, eoa_monte_carlo, eoa_search
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(p["mode"] in ("exact", "monte_carlo"), "params.mode", "expected 'exact' or 'monte_carlo'")
    if p["n0"] is not None:
        if p["mode"] == "exact":
            rep = eoa_exact(tup, p["n0"], p["G"], p["D"], p["extra_directions"], p["cap"])
        else:
            rep = eoa_monte_carlo(tup, p["n0"], p["M"], p["delta"], p["G"], p["D"], cfg["seed"],
                                  p["extra_directions"])
        reps = [rep]
    else:
        reps = eoa_search(tup, p["n0_max"], p["G"], p["D"], p["cap"], p["extra_directions"],
                          p["mode"], p["M"], p["delta"], cfg["seed"])
        rep = reps[-1]
    w.csv("expansion.csv", ["x", "y", "theta", "mean", "halfwidth"],
          zip(rep.x, rep.y, rep.theta, rep.mean, rep.halfwidth))
    summ = rep.summary()
    summ["search"] = [{"n0": r.n0, "lambda_min": r.lambda_min} for r in reps]
    w.json("expansion.json", summ)
    return summ


def _tempered_one(job):
    tup, seed, stream, p = job
    from .cocycle import NEVER, cushion_series, subtempered_norm_constant, tempered_constant, tempered_stopping
    _, _, L = _lognorms(tup, seed, stream, p["n"], p["point"])
    n = p["n"]
    cf = np.array([subtempered_norm_constant(lognorms=L[:k + 1], lam=p["lam"], eps=p["eps"])
                   for k in range(1, n + 1)])
    inc = np.diff(L)
    cr = np.array([tempered_constant(inc[:k], p["lam"], p["eps"], "reverse") for k in range(1, n + 1)])
    cu = cushion_series(lognorms=L, C0=p["C0"], lam=p["lam"], eps=p["eps"])
    ff = tempered_stopping(inc, lam=p["lam"], eps=p["eps"], C=-p["C"])
    return L, cf, cr, cu, (-1 if ff == NEVER else int(ff))


def run_tempered(cfg, w: RunWriter) -> dict:
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(cfg["streams"] >= 1, "streams", "need at least one word stream")
    res = pmap(_tempered_one, [(tup, cfg["seed"], s, p) for s in range(cfg["streams"])])
    L, cf, cr, cu, _ = res[0]
    n = p["n"]
    w.csv("tempered.csv", ["n", "C_fwd", "C_rev", "cushion", "lognorm"],
          zip(range(1, n + 1), cf, cr, cu, L[1:]))
    w.csv("tempered_streams.csv", ["word_stream", "C_fwd", "C_rev", "cushion", "first_failure"],
          [(s, r[1][-1], r[2][-1], r[3][-1], r[4]) for s, r in enumerate(res)])
    finals = np.array([r[1][-1] for r in res])
    lam_hat = float(np.mean([r[0][-1] for r in res]) / n)
    summ = {"lambda_hat": lam_hat, "median_C_fwd": float(np.median(finals)),
            "fraction_tempered_at_C": float(np.mean(finals >= -p["C"])),
            "median_cushion": float(np.median([r[3][-1] for r in res])), "words": len(res)}
    w.json("tempered.json", summ)
    w.svg("tempered.svg", [("ln||Df^n||", np.arange(n + 1), L)], title="log norm growth",
          xlabel="n", ylabel="ln norm")
    return summ


def run_stable_dist(cfg, w: RunWriter) -> dict:
    from .cocycle import stable_direction_distribution
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(cfg["streams"] >= 1, "streams", "need at least one word stream")
    h = stable_direction_distribution(tup, p["point"], p["n"], cfg["streams"], cfg["seed"], bins=p["bins"])
    w.csv("stabledist.csv", ["bin", "count"], zip(range(h.bins), h.counts))
    w.csv("massprofile.csv", ["eps", "hmax"], zip(h.eps_grid, h.hmax))
    summ = {"n": h.n, "words": h.total, "alpha": h.alpha, "alpha_r2": h.alpha_fit.r2,
            "degenerate_fraction": h.degenerate_fraction, "max_bin_mass": float(h.counts.max() / h.total)}
    w.json("stabledist.json", summ)
    w.svg("massprofile.svg", [("h(eps)", np.log10(h.eps_grid), h.hmax)], title="mass profile",
          xlabel="log10 eps", ylabel="h", logy=True)
    return summ


def run_lyapunov(cfg, w: RunWriter) -> dict:
    from .cocycle import splitting_certificate
    from .pesin import lyapunov_metric
    p = cfg["params"]
    tup = build_tuple(cfg)
    _, jacs, _ = _lognorms(tup, cfg["seed"], 0, p["n"], p["point"])
    cert = splitting_certificate(jacs, p["lam"], p["eps"])
    met = lyapunov_metric(jacs, cert, p["lambda_prime"])
    cmp = [met.comparison(i) for i in range(met.n + 1)]
    ts = np.arctan2(met.es[:, 1], met.es[:, 0])
    tu = np.arctan2(met.eu[:, 1], met.eu[:, 0])
    w.csv("lyapunov.csv", ["i", "norm_s", "norm_u", "theta_s", "theta_u", "cmp_lo", "cmp_hi"],
          [(i, met.ns[i], met.nu[i], ts[i], tu[i], cmp[i][0], cmp[i][1]) for i in range(met.n + 1)])
    summ = {"best_C_split": cert.best_C_split, "certificate_passed": cert.passed,
            "angle_decay_exponent": cert.decay_exponent, "violations": met.violations()}
    w.json("lyapunov.json", summ)
    return summ


def _trig_field(terms, path):
    from .pesin import TrigField
    for i, t in enumerate(terms):
        _need(isinstance(t, list) and len(t) == 4, f"{path}[{i}]", "expected [kx, ky, a, phase]")
    return TrigField(tuple(tuple(float(v) for v in t) for t in terms))


def run_graph_transform(cfg, w: RunWriter) -> dict:
    from .pesin import CurveChart, LocalMap, bounds_hold, graph_transform_step
    p = cfg["params"]
    F = LocalMap(p["sigma1"], p["sigma2"], _trig_field(p["f1"], "params.f1"),
                 _trig_field(p["f2"], "params.f2"))
    for i, t in enumerate(p["phi"]):
        _need(isinstance(t, list) and len(t) == 2, f"params.phi[{i}]", "expected [k, amplitude]")
    half = p["half"]

    def phi0(x):
        return sum(a * np.sin(2 * math.pi * k * x) for k, a in p["phi"])

    chart = CurveChart.from_function(phi0, -half, half, p["K"])
    rows = [(0, chart.c0(), chart.c1(), chart.c2(), chart.holder(p["alpha"]), 1)]
    ok = True
    for it in range(1, p["iterations"] + 1):
        chart = graph_transform_step(F, chart, window=(-half, half), alpha=p["alpha"], K=p["K"])
        hold = bounds_hold(chart)
        ok &= hold
        rows.append((it, chart.c0(), chart.c1(), chart.c2(), chart.holder(p["alpha"]), int(hold)))
    w.csv("graph_transform.csv", ["iter", "c0", "c1", "c2", "holder", "bounds_hold"], rows)
    summ = {"final_c1": rows[-1][2], "initial_c1": rows[0][2], "bounds_hold": bool(ok),
            "iterations": p["iterations"]}
    w.json("graph_transform.json", summ)
    w.svg("graph_transform.svg", [("||phi||_1", [r[0] for r in rows], [r[2] for r in rows])],
          title="graph transform", xlabel="iteration", ylabel="C1 norm", logy=True)
    return summ


def run_fake_stable(cfg, w: RunWriter) -> dict:
    from .pesin import fake_stable_leaves
    p = cfg["params"]
    tup = build_tuple(cfg)
    X = np.asarray(p["points"], dtype=float)
    _need(X.ndim == 2 and X.shape[1] == 2, "params.points", "expected a list of [x, y]")
    kw = {} if p["mesh"] is None else {"mesh": p["mesh"]}
    leaves = fake_stable_leaves(tup, word_stream(cfg["seed"], 0, tup.m), X, p["n"], p["delta"], **kw)
    info = []
    for i, lf in enumerate(leaves):
        w.csv(f"leaf_{i}.csv", ["s", "x", "y"], zip(lf.s, lf.nodes[:, 0], lf.nodes[:, 1]))
        info.append({"id": i, "base": lf.base, "tangent": lf.tangent, "theta_s": lf.theta_s,
                     "half_lengths": lf.half_lengths, "short": lf.short, "nodes": len(lf.s)})
    summ = {"n": p["n"], "leaves": info}
    w.json("fake_stable.json", summ)
    return summ


def run_holonomy(cfg, w: RunWriter) -> dict:
    from .pesin import CurveChart, fake_holonomy, fake_stable_leaf
    p = cfg["params"]
    tup = build_tuple(cfg)
    word = word_stream(cfg["seed"], 0, tup.m)
    x = np.asarray(p["point"], dtype=float)
    lf = fake_stable_leaf(tup, word, x, p["n"], p["delta"])
    es = unit(lf.theta_s)
    th = lf.theta_s + math.pi / 2
    T1 = CurveChart.segment(x - p["offset"] * es, th, p["half"])
    T2 = CurveChart.segment(x + p["offset"] * es, th, p["half"])
    src = np.linspace(0.25, 1.75, p["sources"]) * p["half"]
    h = fake_holonomy(tup, word, p["n"], T1, T2, src, p["delta"], fd_step=p["fd_step"])
    w.csv("holonomy.csv", ["source_s", "image_s", "jac_formula", "jac_fd", "n"],
          [(a, b, c, d, h.n) for a, b, c, d in zip(h.source_s, h.image_s, h.jac_formula, h.jac_fd)])
    rel = np.abs(h.jac_formula / h.jac_fd - 1.0)
    summ = {"n": h.n, "max_rel_formula_vs_fd": float(np.nanmax(rel)) if np.any(np.isfinite(rel)) else None,
            "misses": int(h.miss.sum()), "monotone": h.monotone}
    w.json("holonomy.json", summ)
    return summ


def run_recovery(cfg, w: RunWriter) -> dict:
    from .cocycle import NEVER
    from .pairs import GoodTimeParams, PushParams, recovery_experiment, segment_pair
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(cfg["streams"] >= 1, "streams", "need at least one word stream")
    c, d = np.asarray(p["center"], float), unit(p["angle"])
    pair = segment_pair(c - p["half"] * d, c + p["half"] * d, p["mesh"])
    pair = pair.scaled(1.0 / pair.mass)
    gp = GoodTimeParams(p["C"], p["lam"], p["eps"], p["A"], p["eps_prime"], p["R"])
    res = recovery_experiment(tup, pair, cfg["streams"], gp, p["horizon"], cfg["seed"], 0,
                              with_goodness=p["with_goodness"], pp=PushParams(mesh=p["mesh"]))
    T = np.where(res.T == NEVER, -1, res.T)
    w.csv("recovery.csv", ["word_stream", "x_index", "T", "R_at_T"],
          zip(res.streams, res.x_index, T, res.R_at_T))
    fin = res.T[res.T != NEVER]
    ks = np.arange(res.n_min, int(fin.max()) + 1 if len(fin) else res.n_min + 1)
    surv = np.array([(res.T > k).mean() for k in ks])
    summ = {"tail_rate": -res.tail_fit.slope, "tail_r2": res.tail_fit.r2, "n_min": res.n_min,
            "never": int((res.T == NEVER).sum()), "max_R_at_T": float(np.nanmax(res.R_at_T))
            if np.any(np.isfinite(res.R_at_T)) else None, "words": len(T)}
    w.json("recovery.json", summ)
    w.svg("recovery_tail.svg", [("P(T > n)", ks, surv)], title="recovery time tail", xlabel="n",
          ylabel="P(T > n)", logy=True)
    return summ


def run_couple(cfg, w: RunWriter) -> dict:
    from .coupling import ConfigurationParams, CouplingParams, run_coupling_ensemble, summarize
    from .pairs import segment_pair
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(cfg["streams"] >= 1, "streams", "need at least one word stream")
    cp = dict(p["coupling"])
    try:
        cp["config"] = ConfigurationParams(**cp["config"])
        params = CouplingParams(**cp)
    except ValidationError as e:
        raise ConfigError("params.coupling", str(e))
    pairs = []
    for key in ("p1", "p2"):
        seg = np.asarray(p[key], dtype=float)
        _need(seg.shape == (2, 2), f"params.{key}", "expected [[x0, y0], [x1, y1]]")
        pr = segment_pair(seg[0], seg[1], params.mesh)
        pairs.append(pr.scaled(1.0 / pr.mass))
    runs = run_coupling_ensemble(tup, pairs[0], pairs[1], cfg["seed"], range(cfg["streams"]), params,
                                 workers=worker_count())
    s = summarize(tup, runs, cfg["seed"], params)
    res = np.mean([r.residual / r.initial for r in runs], axis=0)
    stp = np.mean([r.stopped / r.initial for r in runs], axis=0)
    cpl = np.mean([r.coupled / r.initial for r in runs], axis=0)
    w.csv("coupling_tail.csv", ["n", "residual", "coupled", "stopped"], zip(s.n, res, cpl, stp))
    w.csv("coupled_pairs.csv", ["x", "ux", "y", "uy", "T"],
          [(x[0], u[0], x[1], u[1], T) for r in runs for x, u, T in r.samples])
    summ = {"p": s.p, "envelope_ok": s.envelope_ok, "tail_slope": s.tail_fit.slope,
            "tail_r2": s.tail_fit.r2, "contraction_violations": s.contraction_violations,
            "samples": s.samples, "final_survival": float(s.survival[-1]),
            "partial_runs": int(sum(r.partial for r in runs)), "words": len(runs)}
    w.json("coupling.json", summ)
    w.svg("coupling_tail.svg", [("P(T > n)", s.n, s.survival)], title="coupling time tail",
          xlabel="n", ylabel="P(T > n)", logy=True)
    return summ


def _mix_one(job):
    from .mixing import quenched_correlation
    tup, seed, stream, phi, psi, p = job
    return quenched_correlation(tup, word_stream(seed, stream, tup.m), phi, psi, p["nmax"], p["N"],
                                p["M"], seed, stream)


def run_mixing(cfg, w: RunWriter) -> dict:
    from .mixing import (Observable, annealed_from, c_omega_tail, decoherence_horizon,
                         pooled_rate_fit, rate_fit)
    p = cfg["params"]
    tup = build_tuple(cfg)
    _need(cfg["streams"] >= 1, "streams", "need at least one word stream")
    try:
        phi = Observable.from_json(p["phi"])
        psi = Observable.from_json(p["psi"])
    except (ValueError, TypeError) as e:
        raise ConfigError("params.phi", f"bad observable: {e}")
    if p["M"] is None:
        _need(p["N"] >= 2 * max(phi.max_frequency, psi.max_frequency), "params.N",
              "lattice aliases the observables")
    window = p["window"]
    if window is None:
        window = [0, decoherence_horizon(tup, phi, psi, p["N"])] if p["M"] is None else [0, p["nmax"]]
    _need(isinstance(window, list) and len(window) == 2, "params.window", "expected [lo, hi]")
    series = pmap(_mix_one, [(tup, cfg["seed"], s, phi, psi, p) for s in range(cfg["streams"])])
    w.csv("corr.csv", ["word_stream", "n", "C_n"],
          [(st, n, c) for st, s in enumerate(series) for n, c in zip(s.n, s.C)])
    ann = annealed_from(series)
    fits = [(str(st), rate_fit(s, p["floor"], window=window)) for st, s in enumerate(series)]
    fa = rate_fit(ann, p["floor"], window=window)
    fits.append(("annealed", fa))
    w.csv("fits.csv", ["series", "eta_hat", "C_hat", "r2", "n_lo", "n_hi", "npoints"],
          [(k, f.eta_hat, f.C_hat, f.r2, f.window[0], f.window[1], f.npoints) for k, f in fits])
    q = [f for k, f in fits[:-1] if not f.degenerate]
    summ = {"window": window, "annealed_eta_hat": fa.eta_hat, "annealed_r2": fa.r2,
            "median_quenched_eta_hat": float(np.median([f.eta_hat for f in q])) if q else None,
            "median_quenched_r2": float(np.median([f.r2 for f in q])) if q else None,
            "fraction_quenched_r2_ge_0.8": float(np.mean([f.r2 >= 0.8 for f in q])) if q else None,
            "words": len(series)}
    if cfg["streams"] >= 30:
        ct = c_omega_tail(tup, phi, psi, p["nmax"], range(cfg["streams"]), cfg["seed"], p["N"],
                          p["floor"], window, series=series)
        w.csv("cw_tail.csv", ["C", "survival"], zip(ct.grid, ct.survival))
        summ.update({"eta_median": ct.eta_median, "median_C_omega": float(np.median(ct.C_omega)),
                     "tail_slope": ct.slope, "tail_r2": ct.slope_fit.r2})
        w.svg("cw_tail.svg", [("P(C_w >= C)", np.log10(ct.grid), ct.survival)], title="C_omega tail",
              xlabel="log10 C", ylabel="survival", logy=True)
    fp = pooled_rate_fit(series, p["floor"], window=window)
    summ.update({"pooled_quenched_eta_hat": fp.eta_hat, "pooled_quenched_r2": fp.r2})
    w.json("mixing.json", summ)
    w.svg("corr.svg", [("annealed |C_n|", ann.n, np.abs(ann.C))] +
          [(f"word {st}", s.n, np.abs(s.C)) for st, s in enumerate(series[:3])],
          title="correlations", xlabel="n", ylabel="|C_n|", logy=True)
    return summ


RUNNERS = {
    "verify-expansion": run_expansion,
    "tempered": run_tempered,
    "stable-dist": run_stable_dist,
    "lyapunov": run_lyapunov,
    "graph-transform": run_graph_transform,
    "fake-stable": run_fake_stable,
    "holonomy": run_holonomy,
    "recovery": run_recovery,
    "couple": run_couple,
    "mixing": run_mixing,
}


def run(cfg: dict, out) -> dict:
    """Execute a resolved config; returns the manifest."""
    w = RunWriter(Path(out))
    t0 = time.perf_counter()
    w.json(RESOLVED, cfg)
    RUNNERS[cfg["experiment"]](cfg, w)
    return w.manifest(cfg, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_KEYS = {
    "verify-expansion": ("expansion.json", ["n0", "lambda_min", "expanding_on_average"]),
    "tempered": ("tempered.json", ["lambda_hat", "median_C_fwd", "fraction_tempered_at_C"]),
    "stable-dist": ("stabledist.json", ["n", "alpha", "max_bin_mass"]),
    "lyapunov": ("lyapunov.json", ["best_C_split", "certificate_passed", "violations"]),
    "graph-transform": ("graph_transform.json", ["initial_c1", "final_c1", "bounds_hold"]),
    "fake-stable": ("fake_stable.json", ["n"]),
    "holonomy": ("holonomy.json", ["max_rel_formula_vs_fd", "misses", "monotone"]),
    "recovery": ("recovery.json", ["tail_rate", "tail_r2", "max_R_at_T"]),
    "couple": ("coupling.json", ["p", "envelope_ok", "tail_slope", "tail_r2", "contraction_violations"]),
    "mixing": ("mixing.json", ["annealed_eta_hat", "median_quenched_eta_hat",
                               "pooled_quenched_r2", "median_C_omega",
                               "tail_slope"]),
}


def _find_runs(root: Path) -> list:
    if (root / MANIFEST).is_file():
        return [root]
    return sorted(p.parent for p in root.glob(f"*/{MANIFEST}"))


def report(run_dir) -> str:
    """Markdown summary of one run directory, or of every run below it."""
    root = Path(run_dir)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    runs = _find_runs(root)
    if not runs:
        raise ValidationError(f"no manifest found under {root}")
    lines = ["# rdslab report", ""]
    for d in runs:
        try:
            man = json.loads((d / MANIFEST).read_text())
            kind = man["experiment"]
            arts = man["artifacts"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValidationError(f"corrupt manifest in {d}: {e}")
        lines.append(f"## {kind} ({d.name})")
        lines.append(f"- config hash `{man.get('config_hash', '?')[:16]}`, version {man.get('version')}, "
                     f"wall time {man.get('wall_time', float('nan')):.2f} s")
        bad = []
        for a in arts:
            f = d / a["path"]
            if not f.is_file() or hashlib.sha256(f.read_bytes()).hexdigest() != a["sha256"]:
                bad.append(a["path"])
        lines.append(f"- artifacts: {len(arts)}, checksum mismatches: {len(bad)}"
                     + (f" ({', '.join(bad)})" if bad else ""))
        name, keys = REPORT_KEYS.get(kind, (None, []))
        if name and (d / name).is_file():
            summ = json.loads((d / name).read_text())
            for k in keys:
                if k in summ:
                    lines.append(f"- {k}: {summ[k]}")
        for a in arts:
            if a["path"].endswith(".svg"):
                lines.append(f"- plot: ![{a['path']}]({a['path']})")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdslab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in list(EXPERIMENTS) + ["report"]:
        sp = sub.add_parser(kind)
        if kind == "report":
            sp.add_argument("run_dir")
            continue
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, help="output directory (created)")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        sp.add_argument("--streams", type=int, help="number of word streams")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    if args.command == "report":
        try:
            print(report(args.run_dir))
            return 0
        except (ValidationError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
    try:
        raw = {}
        if args.config is not None:
            try:
                raw = json.loads(args.config.read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError("config", f"cannot read {args.config}: {e}")
        cfg = resolve_config(args.command, raw, args.seed, args.streams)
        out = args.out if args.out is not None else Path("runs") / args.command
        run(cfg, out)
    except ConfigError as e:
        print(f"config error at {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
