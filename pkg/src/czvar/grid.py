"""Cubes, dyadic trees and piecewise-constant grid signals.

Every signal lives on a root cube split into ``resolution**d`` congruent
cells, with ``resolution`` a power of two so that dyadic subcubes of the root
are unions of cells down to ``log2(resolution)`` levels. Values outside the
root are taken to be zero.
"""

from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from czvar.errors import DomainError, InvalidArgument

__all__ = [
    "Cube",
    "DyadicTree",
    "ScalarSignal",
    "VectorSignal",
    "dyadic_children",
    "dilate",
    "mean_value",
    "covers",
    "dyadic_address",
    "cube_at",
    "block_sums",
    "save_signal",
    "load_signal",
]


@dataclass(frozen=True)
class Cube:
    """Half-open axis-aligned cube ``prod [c_i - side/2, c_i + side/2)``."""

    center: tuple[float, ...]
    side: float
    level: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not self.side > 0:
            raise InvalidArgument(f"cube side must be positive, got {self.side}")
        if len(self.center) not in (1, 2):
            raise InvalidArgument("only d = 1 and d = 2 are supported")

    @classmethod
    def from_bounds(cls, lower: Sequence[float], side: float, level: int = 0) -> Cube:
        return cls(tuple(lo + side / 2 for lo in lower), side, level)

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def lower(self) -> tuple[float, ...]:
        return tuple(c - self.side / 2 for c in self.center)

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(c + self.side / 2 for c in self.center)

    @property
    def volume(self) -> float:
        return self.side**self.d

    def contains_point(self, x) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return all(lo <= xi < hi for lo, xi, hi in zip(self.lower, x, self.upper))

    def contains(self, other: Cube) -> bool:
        """Set inclusion up to a rounding slack of ``1e-12`` times the larger side."""
        tol = 1e-12 * max(self.side, other.side)
        return all(
            lo - tol <= olo and ohi <= hi + tol
            for lo, hi, olo, ohi in zip(self.lower, self.upper, other.lower, other.upper)
        )

    def overlap_volume(self, other: Cube) -> float:
        vol = 1.0
        for lo, hi, olo, ohi in zip(self.lower, self.upper, other.lower, other.upper):
            vol *= max(0.0, min(hi, ohi) - max(lo, olo))
        return vol

    def __repr__(self):
        bounds = " x ".join(f"[{lo:g},{hi:g})" for lo, hi in zip(self.lower, self.upper))
        return f"Cube({bounds}, level={self.level})"


def dyadic_children(q: Cube) -> list[Cube]:
    """The ``2**d`` dyadic children of ``q`` in lexicographic order (axis 0 slowest)."""
    quarter = q.side / 4
    return [
        Cube(
            tuple(c + (quarter if b else -quarter) for c, b in zip(q.center, bits)),
            q.side / 2,
            q.level + 1,
        )
        for bits in itertools.product((0, 1), repeat=q.d)
    ]


def dilate(q: Cube, t: float) -> Cube:
    """Concentric cube with side ``t * q.side``."""
    if not t > 0:
        raise InvalidArgument(f"dilation factor must be positive, got {t}")
    return Cube(q.center, q.side * t, q.level)


def covers(coarse: Sequence[Cube], fine: Sequence[Cube]) -> bool:
    """True iff every cube of ``fine`` lies inside some cube of ``coarse``."""
    return all(any(c.contains(f) for c in coarse) for f in fine)


def dyadic_address(root: Cube, q: Cube) -> tuple[int, tuple[int, ...]] | None:
    """Return ``(level, index)`` of ``q`` in the dyadic tree of ``root``.

    ``None`` when ``q`` is not a dyadic descendant of ``root``.
    """
    ratio = root.side / q.side
    level = round(math.log2(ratio))
    if level < 0 or root.side / 2**level != q.side:
        return None
    idx = []
    for lo, rlo in zip(q.lower, root.lower):
        pos = (lo - rlo) / q.side
        k = round(pos)
        if abs(pos - k) > 1e-9 or not 0 <= k < 2**level:
            return None
        idx.append(k)
    return level, tuple(idx)


def cube_at(root: Cube, level: int, index: Sequence[int]) -> Cube:
    side = root.side / 2**level
    return Cube.from_bounds([rlo + i * side for rlo, i in zip(root.lower, index)], side, level)


@dataclass(frozen=True)
class DyadicTree:
    root: Cube
    max_level: int

    def cubes_at(self, level: int) -> list[Cube]:
        if not 0 <= level <= self.max_level:
            raise InvalidArgument(f"level {level} outside [0, {self.max_level}]")
        n = 2**level
        return [cube_at(self.root, level, idx) for idx in itertools.product(range(n), repeat=self.root.d)]

    def __iter__(self) -> Iterator[Cube]:
        for level in range(self.max_level + 1):
            yield from self.cubes_at(level)

    def locate(self, x, level: int) -> Cube:
        """The level-``level`` cube containing the point ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.root.contains_point(x):
            raise DomainError(f"point {x} outside {self.root}")
        side = self.root.side / 2**level
        idx = [min(int((xi - lo) // side), 2**level - 1) for xi, lo in zip(x, self.root.lower)]
        return cube_at(self.root, level, idx)


def block_sums(values: np.ndarray, level: int, d: int) -> np.ndarray:
    """Sum a ``(res,)*d (+ trailing)`` array over the ``2**level`` dyadic blocks per axis."""
    res = values.shape[0]
    k = 2**level
    b = res // k
    shape = []
    for _ in range(d):
        shape += [k, b]
    trailing = values.shape[d:]
    blocks = values.reshape(tuple(shape) + trailing)
    return blocks.sum(axis=tuple(range(1, 2 * d, 2)))


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True, eq=False)
class _GridSignal:
    domain: Cube
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        d = self.domain.d
        res = vals.shape[0]
        if not _is_pow2(res) or vals.shape[:d] != (res,) * d:
            raise InvalidArgument(f"values must have shape (res,)*{d} with res a power of two")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def max_level(self) -> int:
        return self.resolution.bit_length() - 1

    @property
    def cell_side(self) -> float:
        return self.domain.side / self.resolution

    @property
    def cell_volume(self) -> float:
        return self.cell_side**self.d

    @property
    def cell_diameter(self) -> float:
        return self.cell_side * math.sqrt(self.d)

    @property
    def tree(self) -> DyadicTree:
        return DyadicTree(self.domain, self.max_level)

    def cell_centers(self) -> np.ndarray:
        """Cell centers, shape ``(resolution**d, d)``, row-major cell order."""
        return cell_centers(self.domain, self.resolution)

    def cell_index(self, x) -> int:
        """Flat index of the cell containing ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.domain.contains_point(x):
            raise DomainError(f"point {x} outside {self.domain}")
        h = self.cell_side
        idx = [min(int((xi - lo) // h), self.resolution - 1) for xi, lo in zip(x, self.domain.lower)]
        return int(np.ravel_multi_index(idx, (self.resolution,) * self.d))

    def cube_mask(self, q: Cube) -> np.ndarray:
        """Boolean grid of cells whose centers lie in ``q``."""
        return cube_mask(self.domain, self.resolution, q)

    def overlap_fractions(self, q: Cube) -> np.ndarray:
        """Fraction of each cell covered by ``q`` (exact product of 1-D overlaps)."""
        h = self.cell_side
        w = None
        for lo, qlo, qhi in zip(self.domain.lower, q.lower, q.upper):
            edges = lo + h * np.arange(self.resolution + 1)
            ov = np.clip(np.minimum(edges[1:], qhi) - np.maximum(edges[:-1], qlo), 0.0, None) / h
            w = ov if w is None else np.multiply.outer(w, ov)
        return w


def cell_centers(domain: Cube, resolution: int) -> np.ndarray:
    h = domain.side / resolution
    axes = [lo + h * (np.arange(resolution) + 0.5) for lo in domain.lower]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def cube_mask(domain: Cube, resolution: int, q: Cube) -> np.ndarray:
    h = domain.side / resolution
    mask = None
    for lo, qlo, qhi in zip(domain.lower, q.lower, q.upper):
        c = lo + h * (np.arange(resolution) + 0.5)
        m = (c >= qlo) & (c < qhi)
        mask = m if mask is None else np.logical_and.outer(mask, m)
    return mask


@dataclass(frozen=True, eq=False)
class ScalarSignal(_GridSignal):
    """Real piecewise-constant function on ``domain``; ``values`` has shape ``(res,)*d``."""

    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != self.d:
            raise InvalidArgument("scalar signal values must have exactly d axes")

    @classmethod
    def zeros(cls, domain: Cube, resolution: int) -> ScalarSignal:
        return cls(domain, np.zeros((resolution,) * domain.d))

    @classmethod
    def from_function(cls, domain: Cube, resolution: int, fn) -> ScalarSignal:
        pts = cell_centers(domain, resolution)
        return cls(domain, np.asarray(fn(pts), dtype=float).reshape((resolution,) * domain.d))

    @property
    def n(self) -> int:
        return 1

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum() * self.cell_volume)

    def abs(self) -> ScalarSignal:
        return ScalarSignal(self.domain, np.abs(self.values))

    def restrict(self, q: Cube) -> ScalarSignal:
        """``f * chi_q`` under the center-inclusion rule."""
        return ScalarSignal(self.domain, np.where(self.cube_mask(q), self.values, 0.0))

    def with_values(self, values) -> ScalarSignal:
        return ScalarSignal(self.domain, values)

    def support_within(self, q: Cube) -> bool:
        return not np.any(self.values[~self.cube_mask(q)])


@dataclass(frozen=True, eq=False)
class VectorSignal(_GridSignal):
    """R^n valued piecewise-constant function; ``values`` has shape ``(res,)*d + (n,)``."""

    def __post_init__(self):
        super().__post_init__()
        if self.values.ndim != self.d + 1 or self.values.shape[-1] < 1:
            raise InvalidArgument("vector signal values must have d axes plus a component axis")

    @classmethod
    def from_components(cls, comps: Sequence[ScalarSignal]) -> VectorSignal:
        return cls(comps[0].domain, np.stack([c.values for c in comps], axis=-1))

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    def component(self, k: int) -> ScalarSignal:
        return ScalarSignal(self.domain, self.values[..., k])

    def components(self) -> list[ScalarSignal]:
        return [self.component(k) for k in range(self.n)]

    def project(self, e) -> ScalarSignal:
        """Scalar signal ``<f(x), e>``."""
        return ScalarSignal(self.domain, self.values @ np.asarray(e, dtype=float))

    def norm_signal(self) -> ScalarSignal:
        return ScalarSignal(self.domain, np.linalg.norm(self.values, axis=-1))

    def l1_norm(self) -> float:
        return float(np.linalg.norm(self.values, axis=-1).sum() * self.cell_volume)

    def restrict(self, q: Cube) -> VectorSignal:
        return VectorSignal(self.domain, np.where(self.cube_mask(q)[..., None], self.values, 0.0))

    def with_values(self, values) -> VectorSignal:
        return VectorSignal(self.domain, values)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.n)


def mean_value(f: ScalarSignal, q: Cube) -> float:
    """Average of ``f`` over ``q`` intersected with the domain, by exact cell overlap."""
    w = f.overlap_fractions(q)
    mass = w.sum()
    if mass == 0:
        raise DomainError(f"{q} does not meet the domain {f.domain}")
    return float((w * f.values).sum() / mass)


# --- serialization ---------------------------------------------------------

_MAGIC = b"CZSG"
_HEADER = struct.Struct("<4sIII")


def save_signal(path, sig: ScalarSignal | VectorSignal) -> None:
    """Write a signal as ``.csv`` (text) or any other suffix (little-endian binary).

    Both formats carry ``d, n, resolution, center, side`` followed by the
    row-major cell values; both round-trip bit-exactly.
    """
    path = Path(path)
    n = sig.n
    flat = np.ascontiguousarray(sig.values, dtype="<f8").reshape(-1, n)
    if path.suffix == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "n", "resolution", *[f"center{i}" for i in range(sig.d)], "side"])
            w.writerow([sig.d, n, sig.resolution, *map(repr, sig.domain.center), repr(sig.domain.side)])
            for row in flat:
                w.writerow([repr(float(v)) for v in row])
    else:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, sig.d, n, sig.resolution))
            fh.write(struct.pack(f"<{sig.d + 1}d", *sig.domain.center, sig.domain.side))
            fh.write(flat.tobytes())


def load_signal(path) -> ScalarSignal | VectorSignal:
    """Inverse of :func:`save_signal`; ``n == 1`` files load as :class:`ScalarSignal`."""
    path = Path(path)
    if path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        d, n, res = (int(v) for v in rows[1][:3])
        center = tuple(float(v) for v in rows[1][3 : 3 + d])
        side = float(rows[1][3 + d])
        flat = np.array([[float(v) for v in r] for r in rows[2:]], dtype=float)
    else:
        raw = path.read_bytes()
        magic, d, n, res = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise InvalidArgument(f"{path} is not a signal file")
        off = _HEADER.size
        *center, side = struct.unpack_from(f"<{d + 1}d", raw, off)
        off += 8 * (d + 1)
        flat = np.frombuffer(raw, dtype="<f8", offset=off).reshape(-1, n)
    domain = Cube(tuple(center), side)
    if n == 1:
        return ScalarSignal(domain, flat[:, 0].reshape((res,) * d))
    return VectorSignal(domain, flat.reshape((res,) * d + (n,)))
