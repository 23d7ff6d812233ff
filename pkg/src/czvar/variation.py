"""rho-variation of truncation families and the maximal operators built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from czvar.errors import DomainError, InvalidArgument
from czvar.grid import Cube, ScalarSignal, VectorSignal, block_sums, dilate, dyadic_address
from czvar.kernels import Kernel, TruncationLadder, engine_for, truncated_apply

__all__ = [
    "VariationParams",
    "MaximalParams",
    "rho_variation",
    "rho_variation_rows",
    "extrema_indices",
    "variation_operator",
    "variation_field",
    "vector_variation",
    "vector_variation_field",
    "maximal_field",
    "hl_maximal",
    "power_maximal",
    "power_maximal_field",
    "local_grand_maximal",
    "local_grand_maximal_field",
    "global_grand_maximal",
    "global_grand_maximal_field",
    "weak_norm_estimate",
    "weak_ratio",
]


@dataclass(frozen=True)
class VariationParams:
    rho: float
    ladder: TruncationLadder

    def __post_init__(self):
        if not self.rho > 2:
            raise InvalidArgument(f"rho must exceed 2, got {self.rho}")


@dataclass(frozen=True)
class MaximalParams:
    """Exponents of the auxiliary maximal operators ``M_{r,p'}`` and ``M_{s,p}``.

    ``max_level`` caps the dyadic depth scanned (``None`` scans every level).
    """

    r: float
    p: float
    max_level: int | None = None

    def __post_init__(self):
        if not self.r > 1:
            raise InvalidArgument("r must exceed 1")
        if not 1 < self.p < np.inf:
            raise InvalidArgument("p must lie in (1, inf)")

    @property
    def p_prime(self) -> float:
        return self.p / (self.p - 1)


# --- the variation norm of a finite sequence ---------------------------------


def extrema_indices(a) -> np.ndarray:
    """Endpoints plus the indices where the sequence turns (plateaus collapsed).

    An optimal subsequence for the rho-variation (rho >= 1) can always be taken
    among these: moving a point to the end of its monotone run never decreases
    either adjacent difference.
    """
    a = np.asarray(a, dtype=float)
    if a.size <= 2:
        return np.arange(a.size)
    keep = np.concatenate(([True], a[1:] != a[:-1]))
    idx = np.flatnonzero(keep)
    b = a[idx]
    if b.size <= 2:
        return idx[[0, -1]] if b.size == 2 else idx
    s = np.sign(np.diff(b))
    turn = np.flatnonzero(s[1:] != s[:-1]) + 1
    return idx[np.concatenate(([0], turn, [b.size - 1]))]


def rho_variation(a, rho: float, fast: bool = False) -> float:
    """max over subsequences of ``(sum |a_{i_{j+1}} - a_{i_j}|**rho)**(1/rho)``.

    O(m^2) dynamic program ``best[j] = max_{i<j} best[i] + |a_j - a_i|**rho``.
    With ``fast=True`` the program runs on :func:`extrema_indices` only.
    """
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise InvalidArgument("empty sequence")
    if not rho > 1:
        raise InvalidArgument("rho must exceed 1")
    if fast:
        a = a[extrema_indices(a)]
    best = np.zeros(a.size)
    for j in range(1, a.size):
        best[j] = np.max(best[:j] + np.abs(a[j] - a[:j]) ** rho)
    return float(best.max() ** (1 / rho))


def rho_variation_rows(A: np.ndarray, rho: float) -> np.ndarray:
    """Row-wise :func:`rho_variation` for an ``(N, m)`` array."""
    A = np.asarray(A, dtype=float)
    N, m = A.shape
    best = np.zeros((N, m))
    for j in range(1, m):
        best[:, j] = np.max(best[:, :j] + np.abs(A[:, j : j + 1] - A[:, :j]) ** rho, axis=1)
    return best.max(axis=1) ** (1 / rho)


# --- variation of truncated operators ------------------------------------------


def variation_operator(k: Kernel, f: ScalarSignal, vp: VariationParams, x) -> float:
    """Variation of ``eps -> T_eps f(x)`` along the ladder at one point."""
    vp.ladder.check_floor(f.cell_diameter)
    a = [truncated_apply(k, f, e, x) for e in vp.ladder.eps]
    return rho_variation(a, vp.rho)


def variation_field(k: Kernel, f: ScalarSignal, vp: VariationParams, rows=None, col_mask=None) -> np.ndarray:
    """Variation at cell centers (flat cell order); ``col_mask`` cuts ``f`` off first."""
    A = engine_for(k, f, vp.ladder).values(f.values, rows, col_mask)
    return rho_variation_rows(A, vp.rho)


def vector_variation(k: Kernel, f: VectorSignal, vp: VariationParams, x) -> np.ndarray:
    return np.array([variation_operator(k, fk, vp, x) for fk in f.components()])


def vector_variation_field(k: Kernel, f: VectorSignal, vp: VariationParams, rows=None, col_mask=None) -> np.ndarray:
    """Componentwise variation at cell centers, shape ``(cells, n)``."""
    return np.stack([variation_field(k, fk, vp, rows, col_mask) for fk in f.components()], axis=-1)


# --- Hardy–Littlewood type maximal functions ------------------------------------


def _neighbour_sum(S: np.ndarray, d: int) -> np.ndarray:
    out = S.copy()
    for ax in range(d):
        padded = np.pad(out, [(1, 1) if a == ax else (0, 0) for a in range(d)])
        sl = [slice(None)] * d
        acc = 0
        for shift in (0, 1, 2):
            sl[ax] = slice(shift, shift + out.shape[ax])
            acc = acc + padded[tuple(sl)]
        out = acc
    return out


def _neighbour_count(global_index: np.ndarray, n_at_level: int) -> np.ndarray:
    return 1 + (global_index > 0).astype(int) + (global_index < n_at_level - 1).astype(int)


def _block_maximal(v: np.ndarray, d: int, level0: int = 0, index0=None) -> np.ndarray:
    """Maximal averages of ``v`` for cells of a dyadic block.

    ``v`` holds a nonnegative function on the dyadic cube at ``level0`` with
    multi-index ``index0`` of a root tree and is zero elsewhere. The family is
    every dyadic cube inside the block plus its 3-fold dilate intersected with
    the root; dilate averages divide by the measure of that intersection. Each
    cell takes the max over the members containing it.
    """
    res = v.shape[0]
    if index0 is None:
        index0 = (0,) * d
    L = res.bit_length() - 1
    out = np.zeros_like(v, dtype=float)
    for k in range(L + 1):
        S = block_sums(v, k, d)
        cnt = (res // 2**k) ** d
        nk = 2 ** (level0 + k)
        div = np.ones((2**k,) * d)
        for ax in range(d):
            g = index0[ax] * 2**k + np.arange(2**k)
            shape = [1] * d
            shape[ax] = -1
            div = div * _neighbour_count(g, nk).reshape(shape)
        dil = _neighbour_sum(S, d) / (div * cnt)
        # a cell lies in the dilate of its own cube and of each neighbour
        best = np.maximum(S / cnt, maximum_filter(dil, size=3, mode="constant", cval=-np.inf))
        rep = best
        for ax in range(d):
            rep = np.repeat(rep, res // 2**k, axis=ax)
        np.maximum(out, rep, out=out)
    return out


def maximal_field(v: np.ndarray, d: int) -> np.ndarray:
    """Maximal averages of a nonnegative grid array over the dyadic-plus-dilates family."""
    return _block_maximal(np.asarray(v, dtype=float), d)


def hl_maximal(f: ScalarSignal, x) -> float:
    """Hardy–Littlewood maximal function of ``f`` at the cell containing ``x``."""
    field = maximal_field(np.abs(f.values), f.d)
    return float(field.ravel()[f.cell_index(x)])


def power_maximal_field(f: ScalarSignal | VectorSignal, exponent: float) -> np.ndarray:
    """``sup_Q (avg_Q |f|**exponent)**(1/exponent)`` at every cell."""
    if exponent < 1:
        raise InvalidArgument("exponent must be >= 1")
    mag = np.abs(f.values) if isinstance(f, ScalarSignal) else np.linalg.norm(f.values, axis=-1)
    return maximal_field(mag**exponent, f.d) ** (1 / exponent)


def power_maximal(f: ScalarSignal | VectorSignal, exponent: float, x) -> float:
    return float(power_maximal_field(f, exponent).ravel()[f.cell_index(x)])


# --- grand maximal truncated operators -------------------------------------------


def _require_dyadic(f, q0: Cube) -> tuple[int, tuple[int, ...]]:
    addr = dyadic_address(f.domain, q0)
    if addr is None or addr[0] > f.max_level:
        raise DomainError(f"{q0} is not a grid-aligned dyadic cube of {f.domain}")
    return addr


def _subcube_cells(f, level: int, index) -> np.ndarray:
    """Flat indices of the cells of a dyadic cube of the domain tree."""
    res = f.resolution
    b = res // 2**level
    ranges = [np.arange(i * b, (i + 1) * b) for i in index]
    mesh = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index(tuple(m.ravel() for m in mesh), (res,) * f.d)


def local_grand_maximal_field(k: Kernel, f: ScalarSignal, vp: VariationParams, q0: Cube) -> np.ndarray:
    """Local grand maximal truncated operator at every cell (flat), zero off ``q0``.

    For ``x`` in ``q0``: the max over dyadic ``Q`` with ``x in Q ⊆ q0`` and over
    cell centers ``xi in Q`` of the variation of ``f * chi_{3 q0 \\ 3 Q}`` at ``xi``.
    """
    k0, i0 = _require_dyadic(f, q0)
    eng = engine_for(k, f, vp.ladder)
    out = np.zeros(f.resolution**f.d)
    in3q0 = f.cube_mask(dilate(q0, 3)).ravel()
    for lev in range(k0, f.max_level + 1):
        per = 2 ** (lev - k0)
        for local in np.ndindex(*(per,) * f.d):
            idx = tuple(i * per + j for i, j in zip(i0, local))
            rows = _subcube_cells(f, lev, idx)
            q = Cube.from_bounds(
                [lo + i * f.domain.side / 2**lev for lo, i in zip(f.domain.lower, idx)],
                f.domain.side / 2**lev,
                lev,
            )
            cut = in3q0 & ~f.cube_mask(dilate(q, 3)).ravel()
            if not np.any(cut & (f.values.ravel() != 0)):
                continue
            g = rho_variation_rows(eng.values(f.values, rows, cut), vp.rho).max()
            np.maximum.at(out, rows, g)
    return out


def local_grand_maximal(k: Kernel, f: ScalarSignal, vp: VariationParams, q0: Cube, x) -> float:
    if not q0.contains_point(x) or not f.domain.contains_point(x):
        return 0.0
    return float(local_grand_maximal_field(k, f, vp, q0)[f.cell_index(x)])


def global_grand_maximal_field(k: Kernel, f: ScalarSignal, vp: VariationParams) -> np.ndarray:
    """Grand maximal truncated operator over dyadic cubes and their capped 3-fold dilates.

    For a family member ``R`` the cutoff is ``f * chi_{complement of 3R}``.
    """
    eng = engine_for(k, f, vp.ladder)
    out = np.zeros(f.resolution**f.d)
    fv = f.values.ravel()
    for q in f.tree:
        for member in (q, dilate(q, 3)):
            rows = np.flatnonzero(f.cube_mask(member).ravel())
            cut = ~f.cube_mask(dilate(member, 3)).ravel()
            if rows.size == 0 or not np.any(cut & (fv != 0)):
                continue
            g = rho_variation_rows(eng.values(fv, rows, cut), vp.rho).max()
            np.maximum.at(out, rows, g)
    return out


def global_grand_maximal(k: Kernel, f: ScalarSignal, vp: VariationParams, x) -> float:
    return float(global_grand_maximal_field(k, f, vp)[f.cell_index(x)])


# --- weak-type quotients ------------------------------------------------------------


def weak_ratio(values, cell_volume: float, l1: float) -> float:
    """``sup_t t |{g > t}| / l1`` for a grid function; exact over its value set.

    As ``t`` increases to a value ``v`` of ``g`` the quotient tends to
    ``v |{g >= v}| / l1``, so the supremum is the max of those.
    """
    if not l1 > 0:
        raise InvalidArgument("weak-type quotient needs a positive L1 norm")
    v = np.sort(np.asarray(values, dtype=float).ravel())[::-1]
    v = v[v > 0]
    if v.size == 0:
        return 0.0
    # |{g >= v_i}| counts ties, so use the last occurrence of each value
    counts = np.arange(1, v.size + 1)
    last = np.concatenate((v[1:] != v[:-1], [True]))
    return float(np.max(v[last] * counts[last]) * cell_volume / l1)


def weak_norm_estimate(g: ScalarSignal, f: ScalarSignal) -> float:
    """Weak (1,1) quotient of an operator output ``g`` against its input ``f``."""
    l1 = f.l1_norm()
    if l1 == 0:
        raise InvalidArgument("input has zero L1 norm")
    return weak_ratio(g.values, g.cell_volume, l1)
