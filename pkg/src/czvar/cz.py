"""Dyadic Calderón–Zygmund decomposition at a given height."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from czvar.errors import InvalidArgument
from czvar.grid import Cube, ScalarSignal, block_sums, cube_at, dyadic_address

__all__ = [
    "CZDecomposition",
    "PropertyCheck",
    "cz_decompose",
    "select_stopping_cubes",
    "verify_cz_properties",
]


@dataclass(frozen=True)
class CZDecomposition:
    """``f = good + sum(b for b, _ in bad_parts)`` with bad parts on disjoint dyadic cubes."""

    good: ScalarSignal
    bad_parts: list[tuple[ScalarSignal, Cube]]
    height: float
    root: Cube
    root_selected: bool = False

    @property
    def cubes(self) -> list[Cube]:
        return [q for _, q in self.bad_parts]


@dataclass(frozen=True)
class PropertyCheck:
    ok: bool
    slack: float = 0.0
    factor: float = 0.0
    detail: dict = field(default_factory=dict)


def _exceeds(S: np.ndarray, cnt: int, lam) -> np.ndarray:
    """``S / cnt > lam`` decided exactly.

    ``cnt`` is a power of two, so when ``lam`` is a binary float the products
    ``lam * cnt`` are exact and the float comparison is already exact.
    """
    if isinstance(lam, Fraction) and float(lam) != lam:
        flat = [Fraction(float(s)) > lam * cnt for s in S.ravel()]
        return np.array(flat, dtype=bool).reshape(S.shape)
    return S > float(lam) * cnt


def select_stopping_cubes(values: np.ndarray, lam, d: int) -> list[tuple[int, tuple[int, ...]]]:
    """Maximal dyadic blocks of a nonnegative ``(res,)*d`` array with mean strictly above ``lam``.

    Returns ``(level, index)`` pairs relative to the block array, sorted by level
    then position.
    """
    res = values.shape[0]
    L = res.bit_length() - 1
    covered = np.zeros((1,) * d, dtype=bool)
    out = []
    for k in range(L + 1):
        S = block_sums(values, k, d)
        cnt = (res // 2**k) ** d
        sel = _exceeds(S, cnt, lam) & ~covered
        out += [(k, tuple(int(i) for i in idx)) for idx in np.argwhere(sel)]
        covered = covered | sel
        if k < L:
            for ax in range(d):
                covered = np.repeat(covered, 2, axis=ax)
    return out


def _root_block(f: ScalarSignal, root: Cube) -> tuple[int, tuple[int, ...]]:
    addr = dyadic_address(f.domain, root)
    if addr is None or addr[0] > f.max_level:
        raise InvalidArgument(f"{root} is not a dyadic cube of the signal grid")
    return addr


def _block_slices(f: ScalarSignal, level: int, index) -> tuple[slice, ...]:
    b = f.resolution // 2**level
    return tuple(slice(i * b, (i + 1) * b) for i in index)


def cz_decompose(f: ScalarSignal, lam, root: Cube | None = None) -> CZDecomposition:
    """Stopping-time decomposition of ``f`` over the dyadic subcubes of ``root``.

    A cube is selected when the mean of ``|f|`` over it is strictly greater than
    ``lam`` and no dyadic ancestor (inside ``root``) was selected. ``root``
    defaults to the signal domain; ``f`` is assumed to vanish off ``root``.
    ``root_selected`` flags the vacuous case where ``root`` itself is chosen.
    """
    if not lam > 0:
        raise InvalidArgument(f"height must be positive, got {lam}")
    root = f.domain if root is None else root
    k0, i0 = _root_block(f, root)
    block = np.abs(f.values[_block_slices(f, k0, i0)])
    picks = select_stopping_cubes(block, lam, f.d)

    good = np.array(f.values)
    parts = []
    for k, idx in picks:
        gl, gi = k0 + k, tuple(a * 2**k + b for a, b in zip(i0, idx))
        sl = _block_slices(f, gl, gi)
        piece = f.values[sl]
        mean = piece.sum() / piece.size
        b = np.zeros_like(good)
        b[sl] = piece - mean
        good[sl] = mean
        parts.append((ScalarSignal(f.domain, b), cube_at(f.domain, gl, gi)))
    return CZDecomposition(
        good=ScalarSignal(f.domain, good),
        bad_parts=parts,
        height=lam,
        root=root,
        root_selected=bool(picks) and picks[0][0] == 0,
    )


def verify_cz_properties(dec: CZDecomposition, f: ScalarSignal, rtol: float = 1e-10) -> dict[str, PropertyCheck]:
    """Check the five decomposition properties with constants ``2^d``, ``2^(d+1)``, ``1/lam``.

    ``factor`` is the measured quantity divided by its bound (> 1 means violated);
    ``slack`` is bound minus measured quantity.
    """
    d = f.d
    lam = float(dec.height)
    vol = f.cell_volume
    l1 = f.l1_norm()
    g = dec.good

    gmax = float(np.abs(g.values).max())
    c1_bound = 2**d * lam
    c1 = PropertyCheck(
        ok=gmax <= c1_bound and g.l1_norm() <= l1 * (1 + 1e-15),
        slack=c1_bound - gmax,
        factor=gmax / c1_bound,
        detail={"good_l1": g.l1_norm(), "f_l1": l1},
    )

    dyadic = all(dyadic_address(dec.root, q) is not None for q in dec.cubes)
    masks = [f.cube_mask(q) for q in dec.cubes]
    overlap = int(np.sum(masks, axis=0).max()) if masks else 0
    inside = all(not np.any(b.values[~m]) for (b, _), m in zip(dec.bad_parts, masks))
    c2 = PropertyCheck(ok=dyadic and overlap <= 1 and inside, detail={"max_overlap": overlap})

    ints = [abs(float(b.values.sum()) * vol) for b, _ in dec.bad_parts]
    worst_int = max(ints, default=0.0)
    c3 = PropertyCheck(ok=worst_int <= rtol * max(l1, np.finfo(float).tiny), slack=-worst_int, factor=worst_int)

    ratios = [b.l1_norm() / (2 ** (d + 1) * lam * q.volume) for b, q in dec.bad_parts]
    worst = max(ratios, default=0.0)
    c4 = PropertyCheck(ok=worst <= 1.0, slack=1.0 - worst, factor=worst)

    total = sum(q.volume for q in dec.cubes)
    c5 = PropertyCheck(ok=total <= l1 / lam, slack=l1 / lam - total, factor=total * lam / l1 if l1 else 0.0)

    recon = np.array(g.values)
    for b, _ in dec.bad_parts:
        recon = recon + b.values
    mismatch = int(np.count_nonzero(recon != f.values))
    rec = PropertyCheck(ok=mismatch == 0, detail={"mismatched_cells": mismatch})
    return {"c1": c1, "c2": c2, "c3": c3, "c4": c4, "c5": c5, "reconstruction": rec}
