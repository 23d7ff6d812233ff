"""Calderón–Zygmund kernels and truncated singular integrals on grid signals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from czvar.errors import InvalidArgument, SingularityError, TruncationTooFine
from czvar.grid import Cube, ScalarSignal, VectorSignal, cell_centers

__all__ = [
    "DiniModulus",
    "Kernel",
    "TruncationLadder",
    "hilbert_kernel",
    "riesz_like_kernel",
    "dini_integral",
    "kernel_eval",
    "smoothness_check",
    "truncated_apply",
    "componentwise_apply",
    "TruncationEngine",
    "get_engine",
]


@dataclass(frozen=True)
class DiniModulus:
    """Modulus of continuity ``c * t**delta`` (``form="power"``) or ``c * t`` (``form="linear"``)."""

    form: str = "linear"
    c: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.form not in ("power", "linear"):
            raise InvalidArgument(f"unknown modulus form {self.form!r}")
        if not self.c > 0:
            raise InvalidArgument("modulus constant must be positive")
        if self.form == "linear":
            object.__setattr__(self, "delta", 1.0)
        elif not 0 < self.delta <= 1:
            raise InvalidArgument("power modulus needs 0 < delta <= 1")

    def __call__(self, t):
        return self.c * np.power(np.asarray(t, dtype=float), self.delta)


def dini_integral(w: DiniModulus) -> float:
    """Closed form of the integral of ``w(t)/t`` over ``(0, 1)``."""
    return w.c / w.delta


@dataclass(frozen=True)
class Kernel:
    """Convolution-type kernel ``K(x, y) = k(x - y)``.

    ``hilbert``: ``1 / (pi (x - y))`` in d = 1.
    ``riesz_like``: ``Omega(z/|z|) / |z|**d`` with ``Omega(u) = u_1`` (the cosine
    of the angle to the first axis), z = x - y.
    """

    kind: str
    d: int
    size_constant: float
    modulus: DiniModulus = DiniModulus()

    def __post_init__(self):
        if self.kind not in ("hilbert", "riesz_like"):
            raise InvalidArgument(f"unknown kernel kind {self.kind!r}")
        if self.kind == "hilbert" and self.d != 1:
            raise InvalidArgument("the Hilbert kernel is one-dimensional")
        if self.d not in (1, 2):
            raise InvalidArgument("only d = 1, 2 are supported")

    def of_difference(self, z) -> np.ndarray:
        """Evaluate at differences ``z = x - y`` of shape ``(..., d)``; zero where ``z = 0``."""
        z = np.asarray(z, dtype=float)
        r = np.linalg.norm(z, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "hilbert":
                out = 1.0 / (math.pi * z[..., 0])
            else:
                out = z[..., 0] / r ** (self.d + 1)
        return np.where(r > 0, out, 0.0)


def hilbert_kernel() -> Kernel:
    return Kernel("hilbert", 1, 1 / math.pi, DiniModulus("linear", 1.0))


def riesz_like_kernel(d: int = 2) -> Kernel:
    return Kernel("riesz_like", d, 1.0, DiniModulus("linear", 1.0))


def kernel_eval(k: Kernel, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.array_equal(x, y):
        raise SingularityError("kernel evaluated on the diagonal x = y")
    return float(k.of_difference(x - y))


def smoothness_check(k: Kernel, trials: int, seed: int = 0, scale: float = 1.0) -> float:
    """Worst sampled ratio of the two-sided smoothness quantity to ``w(t) |x-y|^-d``.

    Triples satisfy ``|x - x'| <= |x - y| / 2``. A finite return value certifies
    the smoothness inequality with that constant on the sample.
    """
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    rng = np.random.default_rng(seed)
    d = k.d
    y = rng.uniform(-scale, scale, size=(trials, d))
    x = rng.uniform(-scale, scale, size=(trials, d))
    r = np.linalg.norm(x - y, axis=1)
    u = rng.normal(size=(trials, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    t = rng.uniform(0, 0.5, size=trials)
    xp = x + (t * r)[:, None] * u
    return _smoothness_ratio(k, x, xp, y).max()


def _smoothness_ratio(k: Kernel, x, xp, y) -> np.ndarray:
    x, xp, y = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, xp, y))
    r = np.linalg.norm(x - y, axis=1)
    num = np.abs(k.of_difference(x - y) - k.of_difference(xp - y)) + np.abs(
        k.of_difference(y - x) - k.of_difference(y - xp)
    )
    den = k.modulus(np.linalg.norm(x - xp, axis=1) / r) * r ** (-k.d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(num == 0, 0.0, num / den)


@dataclass(frozen=True)
class TruncationLadder:
    """Strictly decreasing truncation radii ``eps[0] > eps[1] > ... > 0``."""

    eps: tuple[float, ...]

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        object.__setattr__(self, "eps", eps)
        if not eps or eps[-1] <= 0 or any(a <= b for a, b in zip(eps, eps[1:])):
            raise InvalidArgument("ladder must be strictly decreasing and positive")

    @classmethod
    def geometric(cls, eps_max: float, theta: float, m: int) -> TruncationLadder:
        if not 0 < theta < 1 or m < 1:
            raise InvalidArgument("geometric ladder needs 0 < theta < 1 and m >= 1")
        return cls(tuple(eps_max * theta**k for k in range(m)))

    @classmethod
    def spanning(cls, eps_max: float, eps_min: float, m: int) -> TruncationLadder:
        """Geometric ladder with ``m`` radii from ``eps_max`` down to ``eps_min``."""
        if m == 1:
            return cls((eps_max,))
        return cls.geometric(eps_max, (eps_min / eps_max) ** (1 / (m - 1)), m)

    def refined(self) -> TruncationLadder:
        """Ladder of length ``2m`` containing this one as its odd-indexed subsequence.

        Geometric midpoints are inserted between neighbours, plus one radius a
        half-step above the first. The smallest radius is kept, so the finest
        scale probed (and the resolution floor) does not move.
        """
        eps = self.eps
        if len(eps) == 1:
            return TruncationLadder((2 * eps[0], eps[0]))
        out = [eps[0] * math.sqrt(eps[0] / eps[1])]
        for a, b in zip(eps, eps[1:]):
            out += [a, math.sqrt(a * b)]
        out.append(eps[-1])
        return TruncationLadder(tuple(out))

    @property
    def m(self) -> int:
        return len(self.eps)

    def check_floor(self, cell_diameter: float) -> None:
        if self.eps[-1] < 2 * cell_diameter * (1 - 1e-12):
            raise TruncationTooFine(
                f"smallest radius {self.eps[-1]:g} below 2 cell diameters ({2 * cell_diameter:g})"
            )


def _check_eps(eps: float, f) -> None:
    if eps < 2 * f.cell_diameter * (1 - 1e-12):
        raise TruncationTooFine(f"eps={eps:g} below 2 cell diameters of the grid")


def truncated_apply(k: Kernel, f: ScalarSignal, eps: float, x) -> float:
    """Cell-sum value of ``int_{|x-y|>eps} K(x, y) f(y) dy``.

    A cell belongs to the integration region iff its center is farther than
    ``eps`` from ``x``.
    """
    _check_eps(eps, f)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    c = f.cell_centers()
    z = x[None, :] - c
    keep = np.linalg.norm(z, axis=1) > eps
    vals = f.values.ravel()
    return float((k.of_difference(z[keep]) * vals[keep]).sum() * f.cell_volume)


def componentwise_apply(k: Kernel, f: VectorSignal, eps: float, x) -> np.ndarray:
    return np.array([truncated_apply(k, fk, eps, x) for fk in f.components()])


class TruncationEngine:
    """Precomputed kernel table for all cell-center pairs of one grid and ladder.

    ``values`` returns the whole ladder ``T_{eps_k} f(xi)`` for many evaluation
    cells at once; entry ``[i, k]`` sums the cells at distance greater than
    ``eps_k`` from row ``i``.
    """

    def __init__(self, kernel: Kernel, domain: Cube, resolution: int, ladder: TruncationLadder):
        if kernel.d != domain.d:
            raise InvalidArgument("kernel and domain dimensions differ")
        h = domain.side / resolution
        ladder.check_floor(h * math.sqrt(domain.d))
        self.kernel, self.domain, self.resolution, self.ladder = kernel, domain, resolution, ladder
        centers = cell_centers(domain, resolution)
        z = centers[:, None, :] - centers[None, :, :]
        dist = np.linalg.norm(z, axis=-1)
        self.kvol = kernel.of_difference(z) * h**domain.d
        eps_up = np.array(ladder.eps[::-1])
        m = ladder.m
        # first ladder index whose radius is below the distance
        self.first = (m - np.searchsorted(eps_up, dist, side="left")).astype(np.int32)
        self.n_cells = centers.shape[0]

    def values(self, f_flat: np.ndarray, rows=None, col_mask=None) -> np.ndarray:
        m = self.ladder.m
        fv = np.asarray(f_flat, dtype=float).ravel()
        if col_mask is not None:
            fv = np.where(np.asarray(col_mask).ravel(), fv, 0.0)
        if rows is None:
            rows = np.arange(self.n_cells)
        rows = np.asarray(rows)
        cols = np.flatnonzero(fv)
        R = rows.size
        if cols.size == 0 or R == 0:
            return np.zeros((R, m))
        P = self.kvol[np.ix_(rows, cols)] * fv[cols][None, :]
        b = self.first[np.ix_(rows, cols)]
        flat = (np.arange(R)[:, None] * (m + 1) + b).ravel()
        S = np.bincount(flat, weights=P.ravel(), minlength=R * (m + 1)).reshape(R, m + 1)
        return np.cumsum(S[:, :m], axis=1)


@lru_cache(maxsize=8)
def get_engine(kernel: Kernel, domain: Cube, resolution: int, ladder: TruncationLadder) -> TruncationEngine:
    return TruncationEngine(kernel, domain, resolution, ladder)


def engine_for(kernel: Kernel, f, ladder: TruncationLadder) -> TruncationEngine:
    return get_engine(kernel, f.domain, f.resolution, ladder)


def truncated_field(k: Kernel, f: ScalarSignal, ladder: TruncationLadder, rows=None, col_mask=None) -> np.ndarray:
    """``T_{eps_k} f`` at cell centers for every ladder radius, shape ``(rows, m)``."""
    return engine_for(k, f, ladder).values(f.values, rows, col_mask)


def ladder_for(signal, eps_max: float | None = None, m: int = 8) -> TruncationLadder:
    """Default ladder from the domain side down to the two-diameter floor."""
    eps_max = signal.domain.side if eps_max is None else eps_max
    return TruncationLadder.spanning(eps_max, 2 * signal.cell_diameter, m)

