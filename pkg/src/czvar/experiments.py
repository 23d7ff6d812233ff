"""Configuration, corpus generation and the acceptance campaigns.

A campaign evaluates a set of numbered acceptance criteria and returns an
:class:`ExperimentReport` that serialises to JSON (aggregate) and CSV (one row
per instance).
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from czvar import __version__
from czvar.convex import (
    Zonotope,
    john_ellipsoid,
    membership_scale,
    verification_directions,
)
from czvar.cz import cz_decompose, verify_cz_properties
from czvar.grid import Cube, ScalarSignal, VectorSignal, cube_at, dilate
from czvar.kernels import Kernel, TruncationLadder, hilbert_kernel, riesz_like_kernel, truncated_apply
from czvar.sparse import (
    SparseConfig,
    build_sparse_family,
    calibrate_weak_norm,
    carleson_check,
    domination_constant,
    eta_sparse_check,
    pointwise_residual_scalar,
    sparse_step_scalar,
)
from czvar.variation import VariationParams, rho_variation, variation_field, weak_ratio
from czvar.weights import (
    MatrixWeight,
    WeightConstants,
    ap_constant,
    reducing_pair,
    rs_exponents,
    scalar_restriction_check,
    verify_weighted_bound,
)

SCHEMA_VERSION = "1.0"
QUANTUM = 2.0**-20
FAMILIES = ("indicator", "bump", "signs", "rotation", "spike")
CRITERIA = {
    1: "cz_exactness",
    2: "variation_dp",
    3: "hilbert_accuracy",
    4: "stopping_bounds",
    5: "family_certificates",
    6: "john_ellipsoid",
    7: "domination_constant",
    8: "weak_type",
    9: "weight_constants",
    10: "weighted_bound",
}
CAMPAIGNS = {
    "sparse": (4, 5, 7),
    "weaktype": (1, 8),
    "weighted": (9, 10),
    "certify": tuple(CRITERIA),
}
BASELINE_FACTOR = 1.1
STABILITY_TOL = 0.10
DEFAULT_BASELINES = Path(__file__).with_name("baselines.json")


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment parameters; :meth:`from_ini` reads one-level INI sections."""

    kernel: str = "hilbert"
    rho: float = 3.0
    eps_max: float = 4.0
    eps_min: float = 1 / 16
    ladder_m: int = 8
    d: int = 1
    resolution: int = 256
    domain_lower: float = -1.0
    domain_side: float = 4.0
    q0_level: int = 2
    epsilon: float = 0.5
    delta: float = 0.5
    max_depth: int = 6
    annuli: int | None = None
    families: tuple[str, ...] = FAMILIES
    corpus_count: int = 20
    n: int = 2
    seed: int = 0
    weight_p: tuple[float, ...] = (2.0, 3.0)
    weight_strengths: tuple[float, ...] = (0.2, 0.5, 0.8, 0.95)
    weight_omega: float = 3.0
    weight_resolution: int = 512
    out_dir: str = "czvar-out"

    _SECTIONS = {
        "kernel": ("kernel",),
        "variation": ("rho", "eps_max", "eps_min", "ladder_m"),
        "grid": ("d", "resolution", "domain_lower", "domain_side", "q0_level"),
        "sparse": ("epsilon", "delta", "max_depth", "annuli"),
        "corpus": ("families", "corpus_count", "n", "seed"),
        "weights": ("weight_p", "weight_strengths", "weight_omega", "weight_resolution"),
        "output": ("out_dir",),
    }

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser()
        parser.read_string(text)
        kw = {}
        defaults = cls()
        for section in parser.sections():
            if section not in cls._SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cls._SECTIONS[section]:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                kw[key] = _parse_value(getattr(defaults, key), raw)
        return replace(defaults, **kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_ini(Path(path).read_text())

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self._SECTIONS.items():
            parser[section] = {k: _format_value(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    # derived objects

    @property
    def domain(self) -> Cube:
        return Cube.from_bounds([self.domain_lower] * self.d, self.domain_side)

    @property
    def q0(self) -> Cube:
        """Middle-left dyadic cube of the domain at ``q0_level`` (``[0,1)^d`` for the defaults)."""
        mid = 2 ** (self.q0_level - 1) - 1
        return cube_at(self.domain, self.q0_level, (mid,) * self.d)

    def make_kernel(self) -> Kernel:
        return hilbert_kernel() if self.kernel == "hilbert" else riesz_like_kernel(self.d)

    def ladder(self, refined: bool = False) -> TruncationLadder:
        lad = TruncationLadder.spanning(self.eps_max, self.eps_min, self.ladder_m)
        return lad.refined() if refined else lad

    def vp(self, refined: bool = False) -> VariationParams:
        return VariationParams(self.rho, self.ladder(refined))

    def sparse_config(self, weak_norm_cal: float) -> SparseConfig:
        return SparseConfig(self.epsilon, weak_norm_cal, self.d, self.delta, self.max_depth, self.annuli)


def _parse_value(default, raw: str):
    raw = raw.strip()
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(float(s) for s in items) if default and isinstance(default[0], float) else tuple(items)
    if default is None or raw in ("auto", "none"):
        return None if raw in ("auto", "none") else int(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(Fraction(raw)) if "/" in raw else float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if v is None:
        return "auto"
    return repr(v) if isinstance(v, float) else str(v)


# --- corpus ---------------------------------------------------------------------------


def quantize(v: np.ndarray) -> np.ndarray:
    """Round to the dyadic lattice ``2^-20 Z`` so cell sums and dyadic means are exact."""
    return np.round(np.asarray(v, dtype=float) / QUANTUM) * QUANTUM


def upsample(values: np.ndarray, factor: int, d: int) -> np.ndarray:
    """Refine a piecewise-constant grid array by an integer factor per axis."""
    out = values
    for ax in range(d):
        out = np.repeat(out, factor, axis=ax)
    return out


def _local_grid(cfg: ExperimentConfig, resolution: int):
    """Cell-center coordinates relative to ``q0`` (``u in [0,1)^d`` inside it) and the ``q0`` mask."""
    dom, q0 = cfg.domain, cfg.q0
    h = dom.side / resolution
    axes = [(lo + h * (np.arange(resolution) + 0.5) - ql) / q0.side for lo, ql in zip(dom.lower, q0.lower)]
    mesh = np.meshgrid(*axes, indexing="ij")
    u = np.stack(mesh, axis=-1)
    inside = np.all((u >= 0) & (u < 1), axis=-1)
    return u, inside


def _member(family: str, rng: np.random.Generator, cfg: ExperimentConfig, resolution: int, n: int) -> np.ndarray:
    u, inside = _local_grid(cfg, resolution)
    d = cfg.d
    shape = inside.shape + (n,)
    if family == "indicator":
        level = int(rng.integers(0, 7))
        idx = rng.integers(0, 2**level, size=d)
        lo, hi = idx / 2**level, (idx + 1) / 2**level
        ind = np.all((u >= lo) & (u < hi), axis=-1) & inside
        vec = rng.choice([-1.0, -0.5, 0.5, 1.0], size=n)
        vals = ind[..., None] * vec
    elif family == "bump":
        vals = np.zeros(shape)
        for j in range(n):
            c = rng.uniform(0.2, 0.8, size=d)
            width = rng.uniform(0.05, 0.2)
            r2 = ((u - c) ** 2).sum(axis=-1) / width**2
            vals[..., j] = np.where(inside, rng.uniform(0.5, 2.0) * np.exp(-r2), 0.0)
    elif family == "signs":
        vals = np.where(inside[..., None], rng.choice([-1.0, 1.0], size=shape), 0.0)
    elif family == "rotation":
        theta = rng.uniform(0, 2 * np.pi)
        r = np.sqrt(((u - 0.5) ** 2).sum(axis=-1))
        profile = np.stack([np.where(inside, np.cos(6 * r), 0.0), np.where(inside, np.sin(6 * r) * (u[..., 0] - 0.5), 0.0)], -1)
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        vals = np.zeros(shape)
        base = profile @ R.T
        for j in range(n):
            vals[..., j] = base[..., j % 2] * (1.0 if j < 2 else 0.5)
    elif family == "spike":
        # one to three narrow unit-mass spikes on cells of the base grid
        h = cfg.domain_side / resolution
        per_side = int(round(cfg.q0.side / h))
        vals = np.zeros(shape)
        sites = int(rng.integers(1, 4))
        for _ in range(sites):
            cells = int(2 ** rng.integers(0, 3))
            start = rng.integers(0, per_side - cells + 1, size=d)
            ind = np.all((u * per_side >= start) & (u * per_side < start + cells), axis=-1) & inside
            vals += ind[..., None] * rng.choice([-1.0, 1.0], size=n) / (sites * (cells * h) ** d)
    else:
        raise ValueError(f"unknown corpus family {family!r}")
    return quantize(vals)


def generate_corpus(
    cfg: ExperimentConfig,
    seed: int | None = None,
    count: int | None = None,
    resolution: int | None = None,
    n: int | None = None,
    base_resolution: int | None = None,
) -> list[VectorSignal]:
    """Deterministic corpus cycling through ``cfg.families``, supported in ``q0``.

    Members are drawn on ``base_resolution`` (default: ``resolution``) and
    refined exactly, so the same seed describes the same functions at every
    finer resolution.
    """
    seed = cfg.seed if seed is None else seed
    count = cfg.corpus_count if count is None else count
    res = cfg.resolution if resolution is None else resolution
    base = res if base_resolution is None else base_resolution
    n = cfg.n if n is None else n
    if res % base:
        raise ValueError("resolution must be a multiple of the base resolution")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        fam = cfg.families[i % len(cfg.families)]
        vals = _member(fam, rng, cfg, base, n)
        out.append(VectorSignal(cfg.domain, upsample(vals, res // base, cfg.d)))
    return out


def spike_signals(cfg: ExperimentConfig, resolution: int, shrink_steps: int = 3) -> list[ScalarSignal]:
    """Unit-mass spikes at the center of ``q0`` whose support shrinks 4x per step."""
    q0 = cfg.q0
    out = []
    for j in range(shrink_steps):
        width = q0.side / 4 ** (j + 1)
        lower = [c - width / 2 for c in q0.center]
        box = Cube.from_bounds(lower, width)
        f = ScalarSignal.zeros(cfg.domain, resolution)
        mask = f.cube_mask(box)
        out.append(f.with_values(np.where(mask, 1.0 / width**cfg.d, 0.0)))
    return out


# --- results ------------------------------------------------------------------------


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    summary: dict
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        brief = ", ".join(f"{k}={_fmt(v)}" for k, v in self.summary.items() if not isinstance(v, (list, dict)))
        return f"[{flag}] criterion {self.id} ({self.name}): {brief}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class ExperimentReport:
    config_hash: str
    campaign: str
    results: list[CriterionResult]
    versions: dict
    timestamp: float = field(default_factory=time.time)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_json(self) -> str:
        body = {
            "schema": SCHEMA_VERSION,
            "campaign": self.campaign,
            "config_hash": self.config_hash,
            "versions": self.versions,
            "timestamp": self.timestamp,
            "passed": self.passed,
            "criteria": [
                {
                    "id": r.id,
                    "name": r.name,
                    "passed": r.passed,
                    "summary": r.summary,
                    "seconds": r.seconds,
                    "error": r.error,
                    "config_hash": self.config_hash,
                }
                for r in self.results
            ],
        }
        return json.dumps(body, indent=2, default=_json_default)

    def to_csv(self) -> str:
        """One row per instance: ``config_hash, criterion, instance, key, value``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "criterion", "instance", "key", "value"])
        for r in self.results:
            for i, row in enumerate(r.rows):
                for key in sorted(row):
                    w.writerow([self.config_hash, r.id, i, key, _fmt_csv(row[key])])
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o)}")


def _fmt_csv(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def load_baselines(path=None) -> dict:
    path = Path(path) if path is not None else DEFAULT_BASELINES
    if not path.exists():
        return {}
    return json.loads(path.read_text())


# --- calibration ------------------------------------------------------------------


def pilot_pairs(cfg: ExperimentConfig, resolution: int, base_resolution: int | None = None) -> list[tuple[ScalarSignal, Cube]]:
    """Pilot instances for the weak-norm calibration: scalar components on ``q0`` and its children."""
    pilot = generate_corpus(
        cfg, seed=cfg.seed + 10_000, count=2 * len(cfg.families), resolution=resolution, n=1,
        base_resolution=base_resolution,
    )
    pairs = []
    q0 = cfg.q0
    kids = [cube_at(cfg.domain, q0.level + 1, idx) for idx in _child_indices(cfg)]
    for f in pilot:
        s = f.component(0)
        pairs.append((s, q0))
        pairs += [(s, q) for q in kids]
    return pairs


def _child_indices(cfg: ExperimentConfig):
    mid = 2 ** (cfg.q0_level - 1) - 1
    return [tuple(2 * mid + b for b in bits) for bits in itertools.product((0, 1), repeat=cfg.d)]


@lru_cache(maxsize=16)
def calibrated_weak_norm(cfg: ExperimentConfig, resolution: int, refined: bool) -> float:
    """Frozen stand-in for the weak (1,1) norm of the local grand maximal operator."""
    base = min(resolution, cfg.resolution)
    return calibrate_weak_norm(cfg.make_kernel(), cfg.vp(refined), pilot_pairs(cfg, resolution, base))


# --- criteria -------------------------------------------------------------------------


def rho_variation_bruteforce(a, rho: float) -> float:
    """Exhaustive oracle: every one of the ``2^m`` index subsets, vectorised over subsets."""
    a = np.asarray(a, dtype=float)
    m = a.size
    bits = ((np.arange(2**m)[:, None] >> np.arange(m)[None, :]) & 1).astype(bool)
    D = np.abs(a[None, :] - a[:, None]) ** rho
    total = np.zeros(2**m)
    last = np.full(2**m, -1)
    for j in range(m):
        sel = bits[:, j]
        has = sel & (last >= 0)
        total[has] += D[last[has], j]
        last = np.where(sel, j, last)
    return float(total.max() ** (1 / rho))


def criterion_cz(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    res = 2**10
    sub = replace(cfg, d=1)
    corpus = generate_corpus(sub, seed=cfg.seed + 1, count=100, resolution=res, n=2)
    signals = [c for f in corpus for c in f.components()][:200]
    rows, ok = [], True
    t0 = time.perf_counter()
    for i, f in enumerate(signals):
        mean = float(np.abs(f.values).mean())
        if mean == 0:
            continue
        for mult in (1.5, 2.0, 4.0, 8.0, 16.0):
            lam = mean * mult
            f_l1 = f.l1_norm()
            dec = cz_decompose(f, lam)
            rep = verify_cz_properties(dec, f)
            row = {"signal": i, "height": lam, "cubes": len(dec.cubes), "root_selected": dec.root_selected}
            row.update({f"{k}_ok": v.ok for k, v in rep.items()})
            row["c5_slack"] = rep["c5"].slack
            row["f_l1"] = f_l1
            ok &= all(v.ok for v in rep.values()) and not dec.root_selected
            rows.append(row)
    elapsed = time.perf_counter() - t0
    summary = {"signals": len(signals), "decompositions": len(rows), "runtime_s": elapsed, "runtime_ok": elapsed < 10}
    return CriterionResult(1, CRITERIA[1], ok and elapsed < 10, summary, rows)


def criterion_dp(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    rng = np.random.default_rng(cfg.seed + 2)
    t0 = time.perf_counter()
    worst = 0.0
    rows = []
    for i in range(500):
        m = int(rng.integers(1, 15))
        a = rng.normal(size=m) * rng.choice([1e-2, 1.0, 1e2])
        rho = float(rng.choice([2.5, 3.0, 4.0]))
        err = abs(rho_variation(a, rho) - rho_variation_bruteforce(a, rho))
        worst = max(worst, err)
        rows.append({"m": m, "rho": rho, "abs_err": err})
    fast = 0.0
    for rho in (2.5, 3.0, 4.0):
        for _ in range(1000):
            a = rng.normal(size=int(rng.integers(1, 40)))
            fast = max(fast, abs(rho_variation(a, rho, fast=True) - rho_variation(a, rho)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and fast <= 1e-12 and elapsed < 30
    return CriterionResult(2, CRITERIA[2], ok, {"dp_vs_bruteforce": worst, "fast_vs_dp": fast, "runtime_s": elapsed}, rows)


def hilbert_indicator_exact(x: float, eps: float) -> float:
    """``T_eps chi_[-1,1](x)`` for the Hilbert kernel from the antiderivative ``-(1/pi) ln|x - y|``."""

    def piece(a, b):
        if b <= a:
            return 0.0
        return (math.log(abs(x - a)) - math.log(abs(x - b))) / math.pi

    return piece(-1.0, min(1.0, x - eps)) + piece(max(-1.0, x + eps), 1.0)


def hilbert_pairs(resolution: int = 2**12):
    """Twenty ``(x, eps)`` pairs at cell centers, away from the endpoint band ``||x| - 1| <= eps + 0.05``."""
    h = 8 / resolution
    xs = [-3.3, -2.4, -1.9, -1.6, -0.7, -0.45, 0.45, 0.7, 1.6, 1.9, 2.4, 3.3]
    epss = [0.25, 0.5, 0.125, 0.2]
    pairs = []
    for x, e in itertools.product(xs, epss):
        xc = (math.floor((x + 4) / h) + 0.5) * h - 4
        if abs(abs(xc) - 1) > e + 0.05 and len(pairs) < 20:
            pairs.append((xc, e))
    return pairs


def criterion_hilbert(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    res = 2**12
    dom = Cube.from_bounds([-4.0], 8.0)
    f = ScalarSignal.from_function(dom, res, lambda x: ((x[:, 0] >= -1) & (x[:, 0] < 1)).astype(float))
    k = hilbert_kernel()
    rows, worst = [], 0.0
    for x, e in hilbert_pairs(res):
        got = truncated_apply(k, f, e, [x])
        want = hilbert_indicator_exact(x, e)
        rel = abs(got - want) / abs(want)
        worst = max(worst, rel)
        rows.append({"x": x, "eps": e, "value": got, "exact": want, "rel_err": rel})
    return CriterionResult(3, CRITERIA[3], worst <= 1e-3 and len(rows) == 20, {"pairs": len(rows), "max_rel_err": worst}, rows)


def _sparse_setup(cfg: ExperimentConfig, resolution: int, refined: bool):
    k = cfg.make_kernel()
    vp = cfg.vp(refined)
    cal = calibrated_weak_norm(cfg, resolution, refined)
    return k, vp, cfg.sparse_config(cal)


def criterion_stopping(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    k, vp, scfg = _sparse_setup(cfg, cfg.resolution, False)
    corpus = generate_corpus(cfg) if corpus is None else corpus
    lam = Fraction(1, 2 ** (cfg.d + 1))
    rows, ok = [], True
    for i, f in enumerate(corpus):
        for j, s in enumerate(f.components()):
            step = sparse_step_scalar(k, s, vp, cfg.q0, scfg)
            in_cubes = np.zeros_like(step.e_mask)
            for q in step.cubes:
                in_cubes |= s.cube_mask(q)
            leftover = int((step.e_mask & ~in_cubes).sum())
            dens_ok = all(lam <= r <= Fraction(1, 2) for r in step.densities)
            ok &= dens_ok and leftover == 0
            rows.append(
                {
                    "instance": i,
                    "component": j,
                    "cubes": len(step.cubes),
                    "min_density": str(min(step.densities, default="")),
                    "max_density": str(max(step.densities, default="")),
                    "uncovered_E_cells": leftover,
                    "bound_ok": step.bound_ok,
                    "calibration_ok": step.calibration_ok,
                    "weak_ratio": step.weak_ratio,
                }
            )
    summary = {"instances": len(rows), "weak_norm_cal": scfg.weak_norm_cal}
    return CriterionResult(4, CRITERIA[4], ok, summary, rows)


def criterion_family(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    k, vp, scfg = _sparse_setup(cfg, cfg.resolution, False)
    corpus = generate_corpus(cfg) if corpus is None else corpus
    q0 = cfg.q0
    eta = 1 / (2 * 3**cfg.d)
    rows, ok = [], True
    for i, f in enumerate(corpus):
        fam = build_sparse_family(k, f, vp, q0, scfg)
        masses = [sum(q.volume for q in g) for g in fam.generations]
        first_ok = len(masses) < 2 or masses[1] <= cfg.delta * q0.volume
        decay_ok = all(b <= a / 2 for a, b in zip(masses[1:], masses[2:]))
        carleson = carleson_check(fam)
        eta_res = eta_sparse_check(fam, eta)
        inst_ok = first_ok and decay_ok and carleson <= 2 and eta_res.ok
        ok &= inst_ok
        rows.append(
            {
                "instance": i,
                "generations": len(fam.generations),
                "masses": ";".join(repr(m) for m in masses),
                "first_generation_ok": first_ok,
                "decay_ok": decay_ok,
                "carleson": carleson,
                "eta_worst": eta_res.worst,
                "eta_ok": eta_res.ok,
                "truncated": fam.truncated,
                "calibration_ok": fam.calibration_ok,
            }
        )
    return CriterionResult(5, CRITERIA[5], ok, {"instances": len(rows), "eta": eta}, rows)


def criterion_john(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    rng = np.random.default_rng(cfg.seed + 6)
    sq = john_ellipsoid(Zonotope([[1.0, 0.0], [0.0, 1.0]]))
    square_err = float(np.abs(sq.shape - np.eye(2)).max())
    worst_in, worst_out = 0.0, 0.0
    rows = []
    for n, count in ((2, 100), (3, 50)):
        V = verification_directions(n, 360)
        for _ in range(count):
            z = Zonotope(rng.normal(size=(int(rng.integers(n, 16)), n)))
            E = john_ellipsoid(z)
            he, hk = E.support(V), z.support(V)
            inner = float(np.max(he / hk))
            outer = float(np.max(hk / (math.sqrt(n) * he)))
            worst_in, worst_out = max(worst_in, inner), max(worst_out, outer)
            rows.append({"n": n, "generators": z.k, "inner": inner, "outer": outer})
    agree = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 4))
        z = Zonotope(rng.normal(size=(int(rng.integers(n, 9)), n)))
        pt = rng.normal(size=n)
        agree = max(agree, abs(membership_scale(pt, z, "lp") - membership_scale(pt, z, "sweep")))
    ok = square_err <= 1e-6 and worst_in <= 1 + 1e-12 and worst_out <= 1 + 1e-6 and agree <= 1e-6
    summary = {"square_err": square_err, "inner_max": worst_in, "outer_max": worst_out, "lp_vs_sweep": agree}
    return CriterionResult(6, CRITERIA[6], ok, summary, rows)


def _domination_instance(args):
    cfg, resolution, refined, i, f = args
    k, vp, scfg = _sparse_setup(cfg, resolution, refined)
    resid = 0.0
    for s in f.components():
        step = sparse_step_scalar(k, s, vp, cfg.q0, scfg)
        resid = max(resid, pointwise_residual_scalar(k, s, vp, cfg.q0, step.cubes))
    fam = build_sparse_family(k, f, vp, cfg.q0, scfg)
    dom = domination_constant(k, f, vp, fam)
    rank = int(np.linalg.matrix_rank(f.flat())) if f.n > 1 else 1
    return {"instance": i, "resolution": resolution, "refined": refined, "rank": rank, "residual": resid, "domination": dom}


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def criterion_domination(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    variants = [(cfg.resolution, False), (2 * cfg.resolution, False), (cfg.resolution, True)]
    coarse = generate_corpus(cfg) if corpus is None else corpus
    fine = [VectorSignal(f.domain, upsample(f.values, 2, cfg.d)) for f in coarse]
    items = [
        (cfg, r, ref, i, (fine if r != cfg.resolution else coarse)[i])
        for r, ref in variants
        for i in range(len(coarse))
    ]
    rows = _map(_domination_instance, items, jobs)
    # infinite scales are counted; suprema and stability use the finite ones
    infinite = sorted({x["instance"] for x in rows if not math.isfinite(x["domination"])})
    sup = {}
    for r, ref in variants:
        sel = [row for row in rows if row["resolution"] == r and row["refined"] == ref]
        sup[(r, ref)] = (
            max((x["residual"] for x in sel), default=0.0),
            max((x["domination"] for x in sel if x["instance"] not in infinite), default=0.0),
        )
    base_res, base_dom = sup[variants[0]]
    finite = not infinite and all(math.isfinite(x["residual"]) for x in rows)

    def change(a, b):
        return abs(a - b) / b if b else 0.0

    summary = {
        "residual_sup": base_res,
        "domination_sup": base_dom,
        "residual_change_resolution": change(sup[variants[1]][0], base_res),
        "residual_change_ladder": change(sup[variants[2]][0], base_res),
        "domination_change_resolution": change(sup[variants[1]][1], base_dom),
        "domination_change_ladder": change(sup[variants[2]][1], base_dom),
    }
    stable = all(v < STABILITY_TOL for k_, v in summary.items() if k_.endswith(("resolution", "ladder")))
    ok = finite and stable
    ok &= _baseline_ok(summary, baselines, {"residual_sup": "c7_residual_sup", "domination_sup": "c7_domination_sup"})
    summary["finite"] = finite
    summary["infinite_instances"] = len(infinite)
    summary["infinite_ids"] = infinite
    return CriterionResult(7, CRITERIA[7], ok, summary, rows)


def _baseline_ok(summary: dict, baselines, keys: dict[str, str]) -> bool:
    if not baselines:
        summary["baseline"] = "missing"
        return False
    ok = True
    for mkey, bkey in keys.items():
        limit = BASELINE_FACTOR * baselines[bkey]
        summary[f"{mkey}_limit"] = limit
        ok &= summary[mkey] <= limit
    return ok


def criterion_weak(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    k, vp = cfg.make_kernel(), cfg.vp()
    rows = []
    if corpus is None:
        scal = [c for f in generate_corpus(cfg) for c in f.components()]
        scal += spike_signals(cfg, cfg.resolution)
        n_spikes = 3
    else:
        scal = [c for f in corpus for c in f.components()]
        n_spikes = 0
    for i, f in enumerate(scal):
        l1 = f.l1_norm()
        spike = i >= len(scal) - n_spikes
        if l1 == 0:
            rows.append({"instance": i, "spike": spike, "l1": 0.0, "weak_ratio": 0.0})
            continue
        V = variation_field(k, f, vp)
        rows.append({"instance": i, "spike": spike, "l1": l1, "weak_ratio": weak_ratio(V, f.cell_volume, l1)})
    top = max((r["weak_ratio"] for r in rows), default=0.0)
    spikes = [r["weak_ratio"] for r in rows if r["spike"]]
    summary = {"weak_sup": top, "spike_ratios": spikes}
    ok = _baseline_ok(summary, baselines, {"weak_sup": "c8_weak_sup"})
    return CriterionResult(8, CRITERIA[8], ok, summary, rows)


def _weight_family(cfg: ExperimentConfig, p: float, resolution: int | None = None) -> list[tuple[float, MatrixWeight]]:
    res = cfg.weight_resolution if resolution is None else resolution
    x0 = [c for c in cfg.q0.center]
    out = []
    for a in cfg.weight_strengths:
        alphas = [a * (p - 1) * cfg.d, -a * cfg.d][: cfg.n] + [0.0] * max(0, cfg.n - 2)
        out.append((a, MatrixWeight("rotated_diag", cfg.domain, res, cfg.n, alphas=alphas, omega=cfg.weight_omega, x0=x0)))
    return out


def criterion_weights(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    res = cfg.weight_resolution
    ident = ap_constant(MatrixWeight.identity(cfg.domain, res, cfg.n), 2.0)
    rows = []
    worst_restr, worst_pair = 0.0, math.inf
    cubes = [cfg.q0, dilate(cfg.q0, 3)] + [cube_at(cfg.domain, cfg.q0.level + 1, idx) for idx in _child_indices(cfg)]
    for p in cfg.weight_p:
        for a, w in _weight_family(cfg, p):
            ap = ap_constant(w, p)
            restr = scalar_restriction_check(w, p, 64, seed=cfg.seed, ap=ap)
            worst_restr = max(worst_restr, restr)
            for q in cubes:
                pn = reducing_pair(w, q, p).product_norm
                worst_pair = min(worst_pair, pn)
            rows.append({"p": p, "strength": a, "ap": ap, "restriction_ratio": restr})
    r, s = rs_exponents(WeightConstants(1, 1, 1, d=1), 1)
    rs_ok = r == s == 1 + Fraction(1, 2**12)
    ok = ident == 1.0 and worst_restr <= 1 + 1e-9 and worst_pair >= 1 - 1e-6 and rs_ok
    summary = {
        "ap_identity": ident,
        "restriction_max": worst_restr,
        "reducing_product_min": worst_pair,
        "r": str(r),
        "s": str(s),
    }
    return CriterionResult(9, CRITERIA[9], ok, summary, rows)


def _weighted_instance(args):
    cfg, p, a, corpus = args
    w = dict(_weight_family(cfg, p))[a]
    ap = ap_constant(w, p)
    rep = verify_weighted_bound(cfg.make_kernel(), w, p, cfg.vp(), corpus, ap)
    return {"p": p, "strength": a, "ap": ap, "max_ratio": rep.max_ratio, "normalized": rep.normalized}


def criterion_weighted(cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    t0 = time.perf_counter()
    if corpus is None:
        corpus = generate_corpus(cfg, resolution=cfg.weight_resolution, base_resolution=cfg.resolution)
    items = [(cfg, p, a, corpus) for p in cfg.weight_p for a in cfg.weight_strengths]
    rows = _map(_weighted_instance, items, jobs)
    summary = {}
    ok = True
    for p in cfg.weight_p:
        sel = [r for r in rows if r["p"] == p]
        aps = [r["ap"] for r in sel]
        span = max(aps) / min(aps)
        summary[f"p{p:g}_ap_span"] = span
        summary[f"p{p:g}_normalized_sup"] = max(r["normalized"] for r in sel)
        ok &= span >= 10
    keys = {f"p{p:g}_normalized_sup": f"c10_p{p:g}_normalized_sup" for p in cfg.weight_p}
    ok &= _baseline_ok(summary, baselines, keys)
    elapsed = time.perf_counter() - t0
    summary["runtime_s"] = elapsed
    return CriterionResult(10, CRITERIA[10], ok and elapsed < 600, summary, rows)


CRITERION_FUNCS = {
    1: criterion_cz,
    2: criterion_dp,
    3: criterion_hilbert,
    4: criterion_stopping,
    5: criterion_family,
    6: criterion_john,
    7: criterion_domination,
    8: criterion_weak,
    9: criterion_weights,
    10: criterion_weighted,
}


def run_criterion(cid: int, cfg: ExperimentConfig, baselines=None, jobs: int = 1, corpus=None) -> CriterionResult:
    """Evaluate one criterion; module errors are recorded as a failed result."""
    t0 = time.perf_counter()
    try:
        res = CRITERION_FUNCS[cid](cfg, baselines, jobs, corpus)
    except Exception as exc:  # noqa: BLE001 - campaigns keep going
        res = CriterionResult(cid, CRITERIA[cid], False, {}, error=f"{type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - t0
    return res


def run_campaign(
    cfg: ExperimentConfig, campaign: str = "certify", jobs: int = 1, baselines=None, corpus=None
) -> ExperimentReport:
    """Run the criteria of ``campaign``; an explicit ``corpus`` replaces the generated one where one is used."""
    if campaign not in CAMPAIGNS:
        raise ValueError(f"unknown campaign {campaign!r}")
    baselines = load_baselines() if baselines is None else baselines
    results = [run_criterion(cid, cfg, baselines, jobs, corpus) for cid in CAMPAIGNS[campaign]]
    return ExperimentReport(cfg.config_hash(), campaign, results, _versions())


def _versions() -> dict:
    import scipy

    return {"czvar": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def write_report(report: ExperimentReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    j = out / f"{report.campaign}-report.json"
    c = out / f"{report.campaign}-instances.csv"
    j.write_text(report.to_json())
    c.write_text(report.to_csv())
    return j, c


def resolve_out_dir(cli_value: str | None, cfg: ExperimentConfig) -> Path:
    """``--out`` wins, then ``CZVAR_OUT``, then the config's ``out_dir``."""
    return Path(cli_value or os.environ.get("CZVAR_OUT") or cfg.out_dir)


def freeze_baselines(cfg: ExperimentConfig | None = None, path=None, jobs: int = 1) -> dict:
    """Measure the regression quantities of criteria 7, 8, 10 and store them as JSON."""
    cfg = cfg or ExperimentConfig()
    base = {}
    r7 = criterion_domination(cfg, {"c7_residual_sup": math.inf, "c7_domination_sup": math.inf}, jobs)
    base["c7_residual_sup"] = r7.summary["residual_sup"]
    base["c7_domination_sup"] = r7.summary["domination_sup"]
    base["c8_weak_sup"] = criterion_weak(cfg, {"c8_weak_sup": math.inf}).summary["weak_sup"]
    inf10 = {f"c10_p{p:g}_normalized_sup": math.inf for p in cfg.weight_p}
    r10 = criterion_weighted(cfg, inf10, jobs)
    for p in cfg.weight_p:
        base[f"c10_p{p:g}_normalized_sup"] = r10.summary[f"p{p:g}_normalized_sup"]
    base["config_hash"] = cfg.config_hash()
    Path(path or DEFAULT_BASELINES).write_text(json.dumps(base, indent=2) + "\n")
    return base


def corpus_to_dir(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> list[Path]:
    """Write the corpus as binary signal files ``corpus-XXX.sig``."""
    from czvar.grid import save_signal

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(generate_corpus(cfg, seed=seed)):
        p = out / f"corpus-{i:03d}.sig"
        save_signal(p, f)
        paths.append(p)
    return paths


def as_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
