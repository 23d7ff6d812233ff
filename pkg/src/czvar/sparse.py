"""Sparse domination: the scalar stopping step, the vector step and the recursive family.

The scalar step on a dyadic cube ``Q0`` marks the exceptional set ``E`` where
``|f|`` or the local grand maximal truncated operator is large compared with
the average of ``|f|`` over ``3 Q0``, then runs a Calderón–Zygmund
decomposition of ``chi_E`` at height ``2^-(d+1)``. The vector step applies it to
the projections of ``f`` on the principal axes of the John ellipsoid of the
convex body average. Iterating from ``{Q0}`` gives a dyadic family whose
3-fold dilates, together with the shells ``3^l Q0``, are sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from czvar.convex import convex_body_average, john_ellipsoid, membership_scale, minkowski_sum, Zonotope
from czvar.cz import cz_decompose
from czvar.errors import InvalidArgument
from czvar.grid import Cube, ScalarSignal, VectorSignal, cube_at, dilate, dyadic_address
from czvar.kernels import Kernel
from czvar.variation import (
    VariationParams,
    local_grand_maximal_field,
    variation_field,
    vector_variation_field,
    weak_ratio,
)

__all__ = [
    "SparseConfig",
    "ScalarStep",
    "VectorStep",
    "SparseFamily",
    "EtaCheck",
    "sparse_step_scalar",
    "sparse_step_vector",
    "pointwise_residual_scalar",
    "build_sparse_family",
    "carleson_check",
    "eta_sparse_check",
    "domination_constant",
    "calibrate_weak_norm",
    "maximal_cubes",
    "family_to_text",
    "family_from_text",
]


@dataclass(frozen=True)
class SparseConfig:
    """Parameters of the sparse construction.

    ``weak_norm_cal`` stands in for the weak (1,1) norm of the local grand
    maximal truncated operator; see :func:`calibrate_weak_norm`.
    ``annuli=None`` picks the smallest ``L`` with ``3^L Q0`` covering the domain.
    """

    epsilon: float
    weak_norm_cal: float
    d: int = 1
    delta: float = 0.5
    max_depth: int = 6
    annuli: int | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1 or not 0 < self.delta < 1:
            raise InvalidArgument("epsilon and delta must lie in (0, 1)")
        if not self.weak_norm_cal > 0:
            raise InvalidArgument("weak_norm_cal must be positive")
        if self.d not in (1, 2) or self.max_depth < 0:
            raise InvalidArgument("bad dimension or depth")

    @property
    def alpha_d(self) -> Fraction:
        return Fraction(2 ** (self.d + 2) * 3**self.d) / Fraction(self.epsilon)

    @property
    def cz_height(self) -> Fraction:
        return Fraction(1, 2 ** (self.d + 1))

    def with_epsilon(self, epsilon: float) -> SparseConfig:
        return SparseConfig(epsilon, self.weak_norm_cal, self.d, self.delta, self.max_depth, self.annuli)


def _avg_abs(f, q: Cube) -> float:
    """Average of ``|f|`` over ``q`` with ``f`` extended by zero off its domain."""
    mag = np.abs(f.values) if isinstance(f, ScalarSignal) else np.linalg.norm(f.values, axis=-1)
    return float((f.overlap_fractions(q) * mag).sum() * f.cell_volume / q.volume)


# --- scalar step ------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarStep:
    cubes: list[Cube]
    e_mask: np.ndarray
    avg3: float
    weak_ratio: float
    densities: list[Fraction]
    bound_ok: bool
    calibration_ok: bool
    root_selected: bool

    @property
    def e_cells(self) -> int:
        return int(self.e_mask.sum())


def sparse_step_scalar(k: Kernel, f: ScalarSignal, vp: VariationParams, q0: Cube, cfg: SparseConfig) -> ScalarStep:
    """Stopping cubes ``P_j`` of one scalar step on ``q0``.

    ``densities`` holds ``|P_j ∩ E| / |P_j|`` as exact fractions. ``bound_ok``
    records ``sum |P_j| <= epsilon |q0|`` and ``calibration_ok`` the instance
    weak-type ratio not exceeding ``cfg.weak_norm_cal``.
    """
    q3 = dilate(q0, 3)
    avg3 = _avg_abs(f, q3)
    in_q0 = f.cube_mask(q0)
    if avg3 == 0:
        empty = np.zeros_like(in_q0)
        return ScalarStep([], empty, 0.0, 0.0, [], True, True, False)
    alpha = float(cfg.alpha_d)
    gm = local_grand_maximal_field(k, f, vp, q0).reshape(in_q0.shape)
    e_mask = in_q0 & ((np.abs(f.values) > alpha * avg3) | (gm > alpha * cfg.weak_norm_cal * avg3))

    l1_3 = avg3 * q3.volume
    ratio = weak_ratio(gm[in_q0], f.cell_volume, l1_3)

    chi = ScalarSignal(f.domain, e_mask.astype(float))
    dec = cz_decompose(chi, cfg.cz_height, root=q0)
    cubes = dec.cubes
    densities = []
    for q in cubes:
        m = f.cube_mask(q)
        densities.append(Fraction(int(e_mask[m].sum()), int(m.sum())))
    total = sum(q.volume for q in cubes)
    return ScalarStep(
        cubes=cubes,
        e_mask=e_mask,
        avg3=avg3,
        weak_ratio=ratio,
        densities=densities,
        bound_ok=total <= cfg.epsilon * q0.volume,
        calibration_ok=ratio <= cfg.weak_norm_cal,
        root_selected=dec.root_selected,
    )


def pointwise_residual_scalar(
    k: Kernel, f: ScalarSignal, vp: VariationParams, q0: Cube, cubes: list[Cube]
) -> float:
    """``max_{x in q0} |V f(x) - sum_P V(f chi_{3P})(x) chi_P(x)| / <|f|>_{3 q0}`` over cell centers.

    ``cubes`` may be the stopping cubes or any disjoint family of dyadic
    subcubes of ``q0`` covering them.
    """
    avg3 = _avg_abs(f, dilate(q0, 3))
    if avg3 == 0:
        return 0.0
    if not all(q0.contains(q) for q in cubes):
        raise InvalidArgument("residual cubes must lie inside q0")
    rows = np.flatnonzero(f.cube_mask(q0).ravel())
    total = variation_field(k, f, vp, rows=rows)
    pos = {int(r): i for i, r in enumerate(rows)}
    for q in cubes:
        prow = np.flatnonzero(f.cube_mask(q).ravel())
        part = variation_field(k, f, vp, rows=prow, col_mask=f.cube_mask(dilate(q, 3)))
        total[[pos[int(r)] for r in prow]] -= part
    return float(np.abs(total).max() / avg3)


# --- vector step ------------------------------------------------------------------


def maximal_cubes(root: Cube, cubes: list[Cube]) -> list[Cube]:
    """Drop every cube contained in another (dyadic cubes of ``root``); duplicates kept once.

    Sorting by ``(level, index)`` puts ancestors first, so one sweep with a set
    of kept addresses decides maximality by walking up the index bits.
    """
    addrs = sorted({dyadic_address(root, q) for q in cubes})
    if None in addrs:
        raise InvalidArgument("cubes must be dyadic cubes of the root")
    kept: set[tuple[int, tuple[int, ...]]] = set()
    out = []
    for level, idx in addrs:
        if any((lv, tuple(i >> (level - lv) for i in idx)) in kept for lv in range(level)):
            continue
        kept.add((level, idx))
        out.append(cube_at(root, level, idx))
    return out


@dataclass(frozen=True)
class VectorStep:
    cubes: list[Cube]
    axes: np.ndarray
    components: list[ScalarStep]
    bound_ok: bool

    @property
    def calibration_ok(self) -> bool:
        return all(s.calibration_ok for s in self.components)


def sparse_step_vector(
    k: Kernel, f: VectorSignal, vp: VariationParams, q0: Cube, cfg: SparseConfig
) -> VectorStep:
    """Scalar steps along the John-ellipsoid axes of ``<<f>>_{3 q0}`` with ``epsilon = delta / n``."""
    n = f.n
    body = convex_body_average(f, dilate(q0, 3))
    if body.k == 0:
        return VectorStep([], np.eye(n), [], True)
    _, axes = john_ellipsoid(body).axes()
    sub = cfg.with_epsilon(cfg.delta / n)
    steps = [sparse_step_scalar(k, f.project(axes[:, j]), vp, q0, sub) for j in range(n)]
    cubes = maximal_cubes(f.domain, [q for s in steps for q in s.cubes])
    total = sum(q.volume for q in cubes)
    return VectorStep(cubes, axes, steps, total <= cfg.delta * q0.volume)


# --- recursion --------------------------------------------------------------------


@dataclass
class SparseFamily:
    """Dyadic generations plus the final family of dilates and shells.

    ``witness`` maps an index of ``cubes`` to ``(base, excluded)``, describing the
    set ``E = base minus the union of excluded``.
    """

    domain: Cube
    q0: Cube
    generations: list[list[Cube]]
    annuli: list[int] = field(default_factory=list)
    eta: float = 1.0
    witness: dict[int, tuple[Cube, tuple[Cube, ...]]] | None = None
    truncated: bool = False
    tail_mass: float = 0.0
    steps: list = field(default_factory=list)

    @property
    def dyadic(self) -> list[Cube]:
        return [q for gen in self.generations for q in gen]

    @property
    def cubes(self) -> list[Cube]:
        return [dilate(q, 3) for q in self.dyadic] + [dilate(self.q0, 3**ell) for ell in self.annuli]

    @property
    def calibration_ok(self) -> bool:
        return all(s.calibration_ok for s in self.steps)


def annuli_count(domain: Cube, q0: Cube) -> int:
    """Smallest ``L >= 1`` with ``3^L q0`` containing ``domain``."""
    L = 1
    while not dilate(q0, 3**L).contains(domain):
        L += 1
    return L


def _generation_witness(fam: SparseFamily) -> dict[int, tuple[Cube, tuple[Cube, ...]]]:
    wit = {}
    gens = fam.generations
    i = 0
    for g, gen in enumerate(gens):
        nxt = gens[g + 1] if g + 1 < len(gens) else []
        for q in gen:
            wit[i] = (q, tuple(p for p in nxt if q.contains(p)))
            i += 1
    for ell in fam.annuli:
        wit[i] = (dilate(fam.q0, 3**ell), (dilate(fam.q0, 3 ** (ell - 1)),))
        i += 1
    return wit


def build_sparse_family(
    k: Kernel, f: VectorSignal, vp: VariationParams, q0: Cube, cfg: SparseConfig
) -> SparseFamily:
    """Recursive family from ``{q0}``: each cube ``Q`` spawns the vector step on ``f chi_{3Q}``."""
    if dyadic_address(f.domain, q0) is None:
        raise InvalidArgument(f"{q0} is not a dyadic cube of the signal domain")
    gens = [[q0]]
    steps = []
    truncated = False
    while gens[-1]:
        if len(gens) > cfg.max_depth:
            truncated = True
            break
        nxt = []
        for q in gens[-1]:
            step = sparse_step_vector(k, f.restrict(dilate(q, 3)), vp, q, cfg)
            steps.append(step)
            nxt += step.cubes
        if not nxt:
            break
        gens.append(nxt)
    L = cfg.annuli if cfg.annuli is not None else annuli_count(f.domain, q0)
    fam = SparseFamily(
        domain=f.domain,
        q0=q0,
        generations=gens,
        annuli=list(range(2, L + 1)),
        eta=1 / (2 * 3**f.d),
        truncated=truncated,
        tail_mass=sum(q.volume for q in gens[-1]) if truncated else 0.0,
        steps=steps,
    )
    fam.witness = _generation_witness(fam)
    return fam


# --- certificates -----------------------------------------------------------------


def carleson_check(fam: SparseFamily) -> float:
    """``max_{Q in G} sum_{P in G, P ⊆ Q} |P| / |Q|`` over the dyadic generations."""
    cubes = fam.dyadic
    worst = 0.0
    for q in cubes:
        s = sum(p.volume for p in cubes if q.contains(p))
        worst = max(worst, s / q.volume)
    return worst


@dataclass(frozen=True)
class EtaCheck:
    ok: bool
    worst: float
    witness: dict[int, tuple[Cube, tuple[Cube, ...]]]


def _raster_unit(cubes: list[Cube]) -> float:
    base = min(q.side for q in cubes)
    for k in (1, 2, 3, 6, 12):
        u = base / k
        pts = [c / u for q in cubes for c in (*q.lower, q.side)]
        if all(abs(p - round(p)) < 1e-9 for p in pts):
            return u
    raise InvalidArgument("cubes do not share a common lattice")


def _rasterize(cubes: list[Cube]):
    u = _raster_unit(cubes)
    d = cubes[0].d
    lo = [min(q.lower[i] for q in cubes) for i in range(d)]
    hi = [max(q.upper[i] for q in cubes) for i in range(d)]
    shape = tuple(int(round((h - l) / u)) for l, h in zip(lo, hi))

    def mask(q: Cube) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        sl = tuple(
            slice(int(round((ql - l) / u)), int(round((ql - l) / u)) + int(round(q.side / u)))
            for ql, l in zip(q.lower, lo)
        )
        m[sl] = True
        return m

    return mask, u**d


def eta_sparse_check(fam, eta: float, witness=None) -> EtaCheck:
    """Verify ``|E_Q| >= eta |Q|`` with pairwise disjoint ``E_Q ⊆ Q``.

    Uses ``witness`` (or the family's own) when given; otherwise assigns greedily,
    smallest cubes first, each cube taking what earlier cubes left free.
    Measures are exact cell counts on a common lattice.
    """
    cubes = list(fam.cubes)
    if not cubes:
        return EtaCheck(True, 1.0, {})
    witness = witness if witness is not None else getattr(fam, "witness", None)
    mask, cell = _rasterize(cubes + [e for _, ex in (witness or {}).values() for e in ex])
    sets = {}
    if witness is not None:
        for i, q in enumerate(cubes):
            base, excl = witness[i]
            m = mask(base)
            for e in excl:
                m &= ~mask(e)
            sets[i] = m & mask(q)
        used = np.sum([s.astype(int) for s in sets.values()], axis=0)
        disjoint = bool(used.max() <= 1)
    else:
        taken = np.zeros_like(mask(cubes[0]))
        order = sorted(range(len(cubes)), key=lambda i: (cubes[i].volume, i))
        for i in order:
            sets[i] = mask(cubes[i]) & ~taken
            taken |= sets[i]
        disjoint = True
        witness = {i: (cubes[i], ()) for i in range(len(cubes))}
    ratios = [sets[i].sum() * cell / q.volume for i, q in enumerate(cubes)]
    worst = float(min(ratios))
    return EtaCheck(disjoint and worst >= eta * (1 - 1e-12), worst, witness)


def domination_constant(k: Kernel, f: VectorSignal, vp: VariationParams, fam: SparseFamily) -> float:
    """``sup_x`` of the membership scale of ``V f(x)`` in the sparse body at ``x``.

    Points are cell centers of the domain; the Minkowski sum is cached per set
    of family cubes containing the point.
    """
    n = f.n
    V = vector_variation_field(k, f, vp)
    if not np.any(V):
        return 0.0
    cubes = fam.cubes
    masks = np.stack([f.cube_mask(q).ravel() for q in cubes], axis=1)
    bodies = [convex_body_average(f, q) for q in cubes]
    method = "sweep" if n <= 2 else "lp"
    cache: dict[bytes, Zonotope] = {}
    worst = 0.0
    for x in range(V.shape[0]):
        if not np.any(V[x]):
            continue
        key = np.packbits(masks[x]).tobytes()
        if key not in cache:
            z = Zonotope.zero(n)
            for j in np.flatnonzero(masks[x]):
                z = minkowski_sum(z, bodies[j])
            cache[key] = z.merged(angle=1e-9, budget=math.inf) if z.k > 1 else z
        worst = max(worst, membership_scale(V[x], cache[key], method))
    return worst


def calibrate_weak_norm(k: Kernel, vp: VariationParams, pilot: list[tuple[ScalarSignal, Cube]]) -> float:
    """Largest weak-type ratio of the local grand maximal operator over a pilot set.

    Each pilot pair ``(f, Q)`` measures ``sup_t t |{M f > t} ∩ Q| / ||f chi_{3Q}||_1``.
    """
    best = 0.0
    for f, q in pilot:
        fq = f.restrict(dilate(q, 3))
        l1 = _avg_abs(fq, dilate(q, 3)) * dilate(q, 3).volume
        if l1 == 0:
            continue
        gm = local_grand_maximal_field(k, fq, vp, q)
        best = max(best, weak_ratio(gm[f.cube_mask(q).ravel()], f.cell_volume, l1))
    return best


# --- text serialization -------------------------------------------------------------


def family_to_text(fam: SparseFamily) -> str:
    """One cube per line: ``generation level i0 [i1]`` (dyadic coordinates in the domain), then shells."""
    lines = [
        "domain " + " ".join(repr(c) for c in fam.domain.center) + f" {fam.domain.side!r}",
    ]
    for g, gen in enumerate(fam.generations):
        for q in gen:
            level, idx = dyadic_address(fam.domain, q)
            lines.append(" ".join(str(v) for v in (g, level, *idx)))
    lines += [f"annulus {ell}" for ell in fam.annuli]
    return "\n".join(lines) + "\n"


def family_from_text(text: str) -> SparseFamily:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    head = rows[0]
    *center, side = (float(v) for v in head[1:])
    domain = Cube(tuple(center), side)
    gens: list[list[Cube]] = []
    annuli = []
    for row in rows[1:]:
        if row[0] == "annulus":
            annuli.append(int(row[1]))
            continue
        g, level, *idx = (int(v) for v in row)
        while len(gens) <= g:
            gens.append([])
        gens[g].append(cube_at(domain, level, idx))
    fam = SparseFamily(domain, gens[0][0], gens, annuli, eta=1 / (2 * 3**domain.d))
    fam.witness = _generation_witness(fam)
    return fam
