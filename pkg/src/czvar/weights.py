"""Matrix weights: fractional powers, A_p and A_infinity constants, reducing operators.

Every weight is a field of symmetric positive definite matrices sampled at cell
centers. Its eigendecomposition is computed once per cell and all powers
``W^s`` reuse it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from czvar.convex import lowner_symmetric, sweep_directions, verification_directions
from czvar.errors import InvalidArgument, InvalidWeight, RankDeficiency
from czvar.grid import Cube, ScalarSignal, VectorSignal, cell_centers, cube_at, cube_mask, dilate
from czvar.kernels import Kernel
from czvar.variation import VariationParams, _block_maximal, power_maximal_field, vector_variation_field

__all__ = [
    "MatrixWeight",
    "WeightConstants",
    "ReducingOperator",
    "ReducingOperatorPair",
    "WeightedBoundReport",
    "DualPairingReport",
    "matrix_power",
    "cube_family",
    "spectral_norm",
    "ap_constant",
    "scalar_ap_constant",
    "scalar_restriction_check",
    "fujii_wilson",
    "ainf_sc",
    "ainf_dual",
    "weight_constants",
    "reducing_operator",
    "reducing_pair",
    "reducing_normalization",
    "rs_exponents",
    "weighted_lp_norm",
    "verify_weighted_bound",
    "dual_pairing_check",
    "bound_exponent",
]


def _rotation(theta: np.ndarray, n: int) -> np.ndarray:
    U = np.broadcast_to(np.eye(n), theta.shape + (n, n)).copy()
    if n >= 2:
        c, s = np.cos(theta), np.sin(theta)
        U[..., 0, 0], U[..., 0, 1] = c, -s
        U[..., 1, 0], U[..., 1, 1] = s, c
    return U


class MatrixWeight:
    """Closed-form SPD field on a grid.

    Models:

    * ``scalar_power``: ``|x - x0|**alpha * I_n`` (``params = {"alpha", "x0"}``)
    * ``rotated_diag``: ``U(omega x_1) diag(|x - x0|**alpha_i) U^T`` with ``U`` a
      rotation in the first coordinate plane (``params = {"alphas", "omega", "x0"}``)
    * ``constant_pd``: a fixed SPD matrix (``params = {"matrix"}``)

    ``x0`` should sit on a cell vertex so no cell center hits the singularity.
    """

    def __init__(self, model: str, domain: Cube, resolution: int, n: int, **params):
        self.model, self.domain, self.resolution, self.n = model, domain, resolution, n
        self.params = params
        d = domain.d
        x = cell_centers(domain, resolution)
        N = x.shape[0]
        if model == "scalar_power":
            r = np.linalg.norm(x - np.asarray(params.get("x0", np.zeros(d)), dtype=float), axis=1)
            lam = np.repeat((r ** params["alpha"])[:, None], n, axis=1)
            vecs = np.broadcast_to(np.eye(n), (N, n, n)).copy()
        elif model == "rotated_diag":
            alphas = np.asarray(params["alphas"], dtype=float)
            if alphas.size != n:
                raise InvalidArgument("need one exponent per component")
            r = np.linalg.norm(x - np.asarray(params.get("x0", np.zeros(d)), dtype=float), axis=1)
            lam = r[:, None] ** alphas[None, :]
            vecs = _rotation(params.get("omega", 0.0) * x[:, 0], n)
        elif model == "constant_pd":
            A = np.asarray(params["matrix"], dtype=float)
            if A.shape != (n, n) or not np.allclose(A, A.T, rtol=0, atol=1e-14):
                raise InvalidWeight("constant weight must be a symmetric n x n matrix")
            ev, U = np.linalg.eigh((A + A.T) / 2)
            lam = np.broadcast_to(ev, (N, n)).copy()
            vecs = np.broadcast_to(U, (N, n, n)).copy()
        else:
            raise InvalidArgument(f"unknown weight model {model!r}")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise InvalidWeight("weight is not positive definite on every cell")
        self.eigvals = lam
        self.eigvecs = vecs
        self._cache: dict[float, np.ndarray] = {}

    @classmethod
    def identity(cls, domain: Cube, resolution: int, n: int) -> MatrixWeight:
        return cls("constant_pd", domain, resolution, n, matrix=np.eye(n))

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def cell_volume(self) -> float:
        return (self.domain.side / self.resolution) ** self.d

    def powers(self, s: float) -> np.ndarray:
        """``W^s`` at every cell, shape ``(cells, n, n)``."""
        s = float(s)
        if s not in self._cache:
            if s == 0:
                out = np.broadcast_to(np.eye(self.n), self.eigvecs.shape).copy()
            elif self.model == "constant_pd" and s == 1:
                out = np.broadcast_to(np.asarray(self.params["matrix"], dtype=float), self.eigvecs.shape).copy()
            else:
                U = self.eigvecs
                out = np.einsum("cij,cj,ckj->cik", U, self.eigvals**s, U)
            out.flags.writeable = False
            self._cache[s] = out
        return self._cache[s]

    def apply(self, s: float, f: VectorSignal) -> VectorSignal:
        """Cellwise ``W^s f``."""
        self._check_grid(f)
        vals = np.einsum("cij,cj->ci", self.powers(s), f.flat())
        return VectorSignal(f.domain, vals.reshape(f.values.shape))

    def _check_grid(self, f) -> None:
        if f.domain != self.domain or f.resolution != self.resolution or f.n != self.n:
            raise InvalidArgument("signal and weight live on different grids")


def matrix_power(w: MatrixWeight, cell: int, s: float) -> np.ndarray:
    """``W(cell)^s`` from the cell's cached eigendecomposition."""
    if not 0 <= cell < w.eigvals.shape[0]:
        raise InvalidArgument(f"cell {cell} outside the grid")
    return np.array(w.powers(s)[cell])


def spectral_norm(B: np.ndarray) -> np.ndarray:
    """Largest singular value over the last two axes (closed form for n <= 2)."""
    n = B.shape[-1]
    if n == 1:
        return np.abs(B[..., 0, 0])
    if n == 2:
        fro = np.einsum("...ij,...ij->...", B, B)
        det = B[..., 0, 0] * B[..., 1, 1] - B[..., 0, 1] * B[..., 1, 0]
        return np.sqrt((fro + np.sqrt(np.clip(fro**2 - 4 * det**2, 0, None))) / 2)
    return np.linalg.norm(B, ord=2, axis=(-2, -1))


# --- cube families ----------------------------------------------------------------


def cube_family(domain: Cube, resolution: int, dilates: bool = True, max_level: int | None = None):
    """Dyadic cubes of the domain and their 3-fold dilates, with the cells each one meets.

    Yields ``(cube, flat_cell_indices)``; a dilate's cells are those of
    ``3Q ∩ domain``. Members whose cell sets repeat an earlier one are skipped.
    """
    d = domain.d
    L = resolution.bit_length() - 1
    top = L if max_level is None else min(L, max_level)
    seen = set()
    grid = np.arange(resolution**d).reshape((resolution,) * d)
    for level in range(top + 1):
        b = resolution // 2**level
        for idx in np.ndindex(*(2**level,) * d):
            q = cube_at(domain, level, idx)
            members = [(q, tuple((i * b, (i + 1) * b) for i in idx))]
            if dilates:
                box = tuple((max(0, (i - 1) * b), min(resolution, (i + 2) * b)) for i in idx)
                members.append((dilate(q, 3), box))
            for cube, box in members:
                if box in seen:
                    continue
                seen.add(box)
                yield cube, grid[tuple(slice(lo, hi) for lo, hi in box)].ravel()


# --- A_p constants ------------------------------------------------------------------


def _conj(p: float) -> float:
    return p / (p - 1)


def _check_p(p: float) -> None:
    if not 1 < p < math.inf:
        raise InvalidArgument(f"p must lie in (1, inf), got {p}")


def ap_constant(w: MatrixWeight, p: float, dilates: bool = True, max_level: int | None = None) -> float:
    """Matrix A_p constant: sup over the cube family of the double average of ``||W^{1/p}(x) W^{-1/p}(t)||^{p'}``."""
    _check_p(p)
    pp = _conj(p)
    A, B = w.powers(1 / p), w.powers(-1 / p)
    best = 0.0
    for _, cells in cube_family(w.domain, w.resolution, dilates, max_level):
        X, Y = A[cells], B[cells]
        norms = spectral_norm(np.einsum("xij,tjk->xtik", X, Y))
        inner = (norms**pp).mean(axis=1) ** (p / pp)
        best = max(best, float(inner.mean()))
    return best


def scalar_ap_constant(v: np.ndarray, p: float, domain: Cube, resolution: int, dilates: bool = True) -> float:
    """Scalar A_p constant ``sup_Q <v>_Q <v^{-p'/p}>_Q^{p/p'}`` for cell values ``v > 0``."""
    _check_p(p)
    pp = _conj(p)
    v = np.asarray(v, dtype=float).ravel()
    dual = v ** (-pp / p)
    best = 0.0
    for _, cells in cube_family(domain, resolution, dilates):
        best = max(best, float(v[cells].mean() * dual[cells].mean() ** (p / pp)))
    return best


def _unit_directions(n: int, count: int, seed: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(count, n))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _directional(w: MatrixWeight, s: float, e: np.ndarray, power: float) -> np.ndarray:
    """Cell values of ``|W^s e|^power``."""
    return np.linalg.norm(w.powers(s) @ e, axis=-1) ** power


def scalar_restriction_check(w: MatrixWeight, p: float, directions=64, seed: int = 0, ap: float | None = None) -> float:
    """``max_e [|W^{1/p} e|^p]_{A_p} / [W]_{A_p}`` over unit directions ``e``.

    ``directions`` is an array of directions or a count of random ones.
    """
    E = _unit_directions(w.n, directions, seed) if np.isscalar(directions) else np.asarray(directions, float)
    ap = ap_constant(w, p) if ap is None else ap
    E = E / np.linalg.norm(E, axis=1, keepdims=True)
    v = np.linalg.norm(np.einsum("xij,ej->xei", w.powers(1 / p), E), axis=-1) ** p
    dual = v ** (-_conj(p) / p)
    worst = np.zeros(len(E))
    for _, cells in cube_family(w.domain, w.resolution):
        worst = np.maximum(worst, v[cells].mean(axis=0) * dual[cells].mean(axis=0) ** (p / _conj(p)))
    return float(worst.max()) / ap


# --- A_infinity ------------------------------------------------------------------------


def fujii_wilson(w: ScalarSignal, max_level: int | None = None) -> float:
    """``sup_Q (1 / w(Q)) int_Q M(w chi_Q)`` over the dyadic cubes of the domain.

    ``M`` is the maximal operator of :mod:`czvar.variation` (dyadic cubes and
    their capped 3-fold dilates).
    """
    v = np.asarray(w.values, dtype=float)
    if np.any(v <= 0):
        raise InvalidWeight("Fujii–Wilson constant needs a positive weight")
    d, res = w.d, w.resolution
    top = w.max_level if max_level is None else min(max_level, w.max_level)
    best = 0.0
    for level in range(top + 1):
        b = res // 2**level
        for idx in np.ndindex(*(2**level,) * d):
            block = v[tuple(slice(i * b, (i + 1) * b) for i in idx)]
            m = _block_maximal(block, d, level, idx)
            best = max(best, float(m.sum() / block.sum()))
    return best


def _ainf(w: MatrixWeight, s: float, power: float, directions, seed: int) -> float:
    E = _unit_directions(w.n, directions, seed) if np.isscalar(directions) else np.asarray(directions, float)
    shape = (w.resolution,) * w.d
    return max(
        fujii_wilson(ScalarSignal(w.domain, _directional(w, s, e / np.linalg.norm(e), power).reshape(shape)))
        for e in E
    )


def ainf_sc(w: MatrixWeight, p: float, directions=64, seed: int = 0) -> float:
    """``sup_e [|W^{1/p} e|^p]_{A_inf}`` over sampled unit directions."""
    _check_p(p)
    return _ainf(w, 1 / p, p, directions, seed)


def ainf_dual(w: MatrixWeight, p: float, directions=64, seed: int = 0) -> float:
    """``[W^{-p'/p}]`` at exponent ``p'``: ``sup_e [|W^{-1/p} e|^{p'}]_{A_inf}``."""
    _check_p(p)
    return _ainf(w, -1 / p, _conj(p), directions, seed)


@dataclass(frozen=True)
class WeightConstants:
    ap: float
    ainf_sc: float
    ainf_dual: float
    r: float | Fraction = field(default=None)
    s: float | Fraction = field(default=None)
    d: int = 1

    def __post_init__(self):
        if self.r is None or self.s is None:
            r, s = rs_exponents(self, self.d)
            object.__setattr__(self, "r", r)
            object.__setattr__(self, "s", s)


def rs_exponents(consts: WeightConstants, d: int) -> tuple:
    """``r = 1 + 1/(2^{d+11} ainf_dual)`` and ``s = 1 + 1/(2^{d+11} ainf_sc)``.

    Exact (``Fraction``) when the stored constants are integers or fractions.
    """
    if not consts.ainf_sc > 0 or not consts.ainf_dual > 0:
        raise InvalidArgument("A_inf constants must be positive")

    def one(c):
        if isinstance(c, (int, Fraction)):
            return 1 + Fraction(1, 2 ** (d + 11)) / Fraction(c)
        return 1 + 1 / (2 ** (d + 11) * c)

    return one(consts.ainf_dual), one(consts.ainf_sc)


def weight_constants(w: MatrixWeight, p: float, directions=64, seed: int = 0) -> WeightConstants:
    return WeightConstants(
        ap=ap_constant(w, p),
        ainf_sc=ainf_sc(w, p, directions, seed),
        ainf_dual=ainf_dual(w, p, directions, seed),
        d=w.d,
    )


# --- reducing operators -------------------------------------------------------------


@dataclass(frozen=True)
class ReducingOperator:
    """SPD ``matrix`` with ``lower * rho(e) <= |matrix e| <= upper * rho(e)`` on check directions."""

    matrix: np.ndarray
    lower: float
    upper: float
    sandwich_factor: float


@dataclass(frozen=True)
class ReducingOperatorPair:
    w_q: np.ndarray
    w_q_dual: np.ndarray
    quality: tuple[float, float, float, float]

    @property
    def product_norm(self) -> float:
        return float(spectral_norm(self.w_q @ self.w_q_dual))


def _rho(Mx: np.ndarray, E: np.ndarray, q: float) -> np.ndarray:
    """``(avg_x |M_x e|^q)^{1/q}`` for each row ``e`` of ``E``."""
    v = np.linalg.norm(np.einsum("xij,ej->exi", Mx, E), axis=-1)
    return (v**q).mean(axis=1) ** (1 / q)


def reducing_operator(
    w: MatrixWeight,
    q: Cube,
    p: float,
    side: str = "primal",
    exponent: float | None = None,
    tol: float = 1e-9,
) -> ReducingOperator:
    """Reducing operator of ``W^{1/p}`` (``primal``) or ``W^{-1/p}`` (``dual``) on ``q``.

    The norm ``rho(e) = (avg_q |W^{±1/p} e|^exponent)^{1/exponent}`` has a dual
    unit sphere parametrised by gradients of ``rho``; the minimum-volume
    ellipsoid around those gradients is polar to the John ellipsoid of the unit
    ball of ``rho``, and ``W_Q = (kappa M)^{1/2}``. Default exponents are ``p``
    (primal) and ``p'`` (dual).
    """
    _check_p(p)
    if side not in ("primal", "dual"):
        raise InvalidArgument("side must be 'primal' or 'dual'")
    s = 1 / p if side == "primal" else -1 / p
    ex = (p if side == "primal" else _conj(p)) if exponent is None else float(exponent)
    if ex < 1:
        raise InvalidArgument("exponent must be >= 1")
    cells = np.flatnonzero(_cells_in(w, q))
    if cells.size == 0:
        raise RankDeficiency(f"{q} contains no cells of the weight grid")
    Mx = w.powers(s)[cells]
    n = w.n
    if n == 1:
        val = float((np.abs(Mx[:, 0, 0]) ** ex).mean() ** (1 / ex))
        if not val > 0:
            raise RankDeficiency("weight vanishes on the cube")
        return ReducingOperator(np.array([[val]]), 1.0, 1.0, 1.0)
    E = sweep_directions(n)
    Me = np.einsum("xij,ej->exi", Mx, E)
    mag = np.linalg.norm(Me, axis=-1)
    rho = (mag**ex).mean(axis=1) ** (1 / ex)
    if np.any(rho <= 1e-300):
        raise RankDeficiency("averaged weight is degenerate on the cube")
    coef = (mag ** (ex - 2))[..., None] * Me
    grad = np.einsum("exi,xij->ej", coef, Mx) / len(cells) * (rho ** (1 - ex))[:, None]
    M, kappa = lowner_symmetric(grad, tol=tol)
    vals, vecs = np.linalg.eigh(kappa * M)
    if vals.min() <= 0:
        raise RankDeficiency("reducing operator is singular")
    WQ = (vecs * np.sqrt(vals)) @ vecs.T
    WQ = (WQ + WQ.T) / 2
    V = verification_directions(n)
    ratio = np.linalg.norm(V @ WQ.T, axis=1) / _rho(Mx, V, ex)
    return ReducingOperator(WQ, float(ratio.min()), float(ratio.max()), math.sqrt(kappa))


def _cells_in(w: MatrixWeight, q: Cube) -> np.ndarray:
    return cube_mask(w.domain, w.resolution, q).ravel()


def reducing_pair(w: MatrixWeight, q: Cube, p: float) -> ReducingOperatorPair:
    a = reducing_operator(w, q, p, "primal")
    b = reducing_operator(w, q, p, "dual")
    return ReducingOperatorPair(a.matrix, b.matrix, (a.lower, a.upper, b.lower, b.upper))


def reducing_normalization(w: MatrixWeight, q: Cube, p: float, exponent: float, side: str = "dual") -> float:
    """``(avg_q ||R^{-1} W^{∓1/p}(y)||^exponent)^{1/exponent}`` for the matching reducing operator ``R``."""
    R = reducing_operator(w, q, p, side, exponent).matrix
    s = -1 / p if side == "dual" else 1 / p
    Mx = w.powers(s)[_cells_in(w, q)]
    norms = spectral_norm(np.einsum("ij,xjk->xik", np.linalg.inv(R), Mx))
    return float((norms**exponent).mean() ** (1 / exponent))


# --- weighted norms and the end-to-end checks ------------------------------------------


def bound_exponent(p: float) -> float:
    """Exponent ``1 + 1/(p-1) - 1/p`` of the A_p constant in the weighted bound."""
    return 1 + 1 / (p - 1) - 1 / p


def weighted_lp_norm(f: VectorSignal, w: MatrixWeight, p: float) -> float:
    """``(int |W^{1/p} f|^p)^{1/p}`` by cell sums."""
    _check_p(p)
    g = w.apply(1 / p, f)
    return float(((np.linalg.norm(g.flat(), axis=1) ** p).sum() * g.cell_volume) ** (1 / p))


def _lp(values: np.ndarray, p: float, vol: float) -> float:
    mag = np.linalg.norm(values.reshape(values.shape[0], -1), axis=1) if values.ndim > 1 else np.abs(values)
    return float(((mag**p).sum() * vol) ** (1 / p))


@dataclass(frozen=True)
class WeightedBoundReport:
    ratios: list[float]
    max_ratio: float
    ap: float
    normalized: float


def verify_weighted_bound(
    k: Kernel, w: MatrixWeight, p: float, vp: VariationParams, corpus: list[VectorSignal], ap: float | None = None
) -> WeightedBoundReport:
    """``||W^{1/p} V(T(W^{-1/p} f))||_p / ||f||_p`` over a corpus, and its max over ``[W]_{A_p}^{1+1/(p-1)-1/p}``."""
    _check_p(p)
    ap = ap_constant(w, p) if ap is None else ap
    ratios = []
    for f in corpus:
        w._check_grid(f)
        den = _lp(f.flat(), p, f.cell_volume)
        if den == 0:
            ratios.append(0.0)
            continue
        g = w.apply(-1 / p, f)
        V = vector_variation_field(k, g, vp)
        out = np.einsum("cij,cj->ci", w.powers(1 / p), V)
        ratios.append(_lp(out, p, f.cell_volume) / den)
    top = max(ratios, default=0.0)
    return WeightedBoundReport(ratios, top, ap, top / ap ** bound_exponent(p))


@dataclass(frozen=True)
class DualPairingReport:
    pairing: float
    bound: float
    ratio: float
    r: float
    s: float
    m_r_ratio: float
    m_s_ratio: float


def dual_pairing_check(
    fam, w: MatrixWeight, p: float, f: VectorSignal, g: VectorSignal, consts: WeightConstants | None = None
) -> DualPairingReport:
    """``|<W^{1/p} T^S W^{-1/p} f, g>| / ([W]_{A_p}^{γ} ||f||_p ||g||_{p'})`` with ``T^S`` the sparse averaging operator.

    ``T^S F = sum_{Q in S} <F>_Q chi_Q`` (all ``phi_Q = 1``), ``γ = 1 + 1/(p-1) - 1/p``.
    The auxiliary maximal operators ``M_{r,p'}`` and ``M_{s,p}`` are reported as
    ``||M f||_p / (||f||_p (r')^{1/p})`` and ``||M g||_{p'} / (||g||_{p'} (s')^{1/p'})``.
    """
    _check_p(p)
    pp = _conj(p)
    consts = weight_constants(w, p) if consts is None else consts
    r, s = float(consts.r), float(consts.s)
    nf, ng = _lp(f.flat(), p, f.cell_volume), _lp(g.flat(), pp, g.cell_volume)
    if nf == 0 or ng == 0:
        return DualPairingReport(0.0, 0.0, 0.0, r, s, 0.0, 0.0)
    F = w.apply(-1 / p, f).flat()
    TF = np.zeros_like(F)
    vol = f.cell_volume
    for q in fam.cubes:
        wts = f.overlap_fractions(q).ravel()
        avg = (wts[:, None] * F).sum(axis=0) * vol / q.volume
        TF[f.cube_mask(q).ravel()] += avg
    out = np.einsum("cij,cj->ci", w.powers(1 / p), TF)
    pairing = abs(float(np.einsum("ci,ci->", out, g.flat()) * vol))
    bound = consts.ap ** bound_exponent(p) * nf * ng
    r_conj, s_conj = r / (r - 1), s / (s - 1)
    mr = _lp(power_maximal_field(f, pp * r).ravel(), p, vol) / (nf * r_conj ** (1 / p))
    ms = _lp(power_maximal_field(g, p * s).ravel(), pp, vol) / (ng * s_conj ** (1 / pp))
    return DualPairingReport(pairing, bound, pairing / bound, r, s, mr, ms)
