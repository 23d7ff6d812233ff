"""Zonotopes, ellipsoids, John ellipsoids and the convex-body sparse operator.

A zonotope ``{sum t_i g_i : |t_i| <= 1}`` has support function
``h(u) = sum |<g_i, u>|``. The discrete convex body average of a grid signal
over a cube is exactly such a body.

The John ellipsoid is computed through polarity: the facet normals ``a`` of
the zonotope give the polar body ``conv{± a / h(a)}``, whose minimum-volume
enclosing ellipsoid (barrier warm start, then pairwise Frank-Wolfe steps) is
the polar of the maximal inscribed ellipsoid. For any iterate with design matrix ``M`` and
worst leverage ``kappa`` the ellipsoid ``(kappa M)^(-1/2) B`` satisfies
``E ⊂ K ⊂ sqrt(kappa) E``, so the sandwich factor is certified, not estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linprog

from czvar.errors import InvalidArgument
from czvar.grid import Cube, VectorSignal

__all__ = [
    "Zonotope",
    "Ellipsoid",
    "convex_body_average",
    "support_function",
    "minkowski_sum",
    "john_ellipsoid",
    "lowner_symmetric",
    "facet_normals",
    "membership_scale",
    "sparse_operator_eval",
    "sweep_directions",
    "verification_directions",
]

MERGE_ANGLE = 1e-3
GENERATOR_BUDGET = 256


def _canonical_sign(g: np.ndarray) -> np.ndarray:
    """Flip rows so the first nonzero coordinate is positive."""
    first = np.argmax(np.abs(g) > 0, axis=1)
    s = np.sign(g[np.arange(len(g)), first])
    return g * s[:, None]


class Zonotope:
    """Centrally symmetric zonotope given by its generators (rows of an ``(k, n)`` array)."""

    def __init__(self, generators, n: int | None = None):
        g = np.asarray(generators, dtype=float)
        if g.ndim == 1:
            g = g.reshape(0, n) if g.size == 0 and n else g[None, :]
        if g.ndim != 2:
            raise InvalidArgument("generators must be an (k, n) array")
        if n is not None and g.shape[1] != n:
            raise InvalidArgument("generator dimension mismatch")
        self.generators = g[np.any(g != 0, axis=1)]
        self.generators.flags.writeable = False
        self.n = g.shape[1]
        self.merge_error = 0.0

    @classmethod
    def zero(cls, n: int) -> Zonotope:
        return cls(np.zeros((0, n)), n)

    @property
    def k(self) -> int:
        return self.generators.shape[0]

    def support(self, u) -> np.ndarray | float:
        u = np.asarray(u, dtype=float)
        if np.any(np.linalg.norm(np.atleast_2d(u), axis=-1) == 0):
            raise InvalidArgument("support function needs a nonzero direction")
        h = np.abs(np.atleast_2d(u) @ self.generators.T).sum(axis=-1)
        return float(h[0]) if u.ndim == 1 else h

    def merged(self, angle: float = MERGE_ANGLE, budget: int = GENERATOR_BUDGET) -> Zonotope:
        """Combine generators within ``angle`` of each other (up to sign).

        Each cluster is replaced by the sign-aligned sum of its members, which is
        exact for parallel generators. The angle is doubled until at most
        ``budget`` generators remain; the relative support error on the sweep
        directions is stored in ``merge_error``.
        """
        if self.k <= 1:
            return self
        g = _canonical_sign(self.generators)
        # scale rows first so tiny generators do not underflow to norm zero
        big = np.abs(g).max(axis=1, keepdims=True)
        unit = g / big
        norms = big[:, 0] * np.linalg.norm(unit, axis=1)
        dirs = unit / np.linalg.norm(unit, axis=1, keepdims=True)
        order = np.argsort(-norms, kind="stable")
        while True:
            cos_tol = math.cos(angle)
            label = -np.ones(self.k, dtype=int)
            reps = []
            for i in order:
                if label[i] >= 0:
                    continue
                c = dirs @ dirs[i]
                # a few ulps of slack so exactly parallel rows always merge
                hit = (np.abs(c) >= cos_tol - 4 * np.finfo(float).eps) & (label < 0)
                hit[i] = True
                label[hit] = len(reps)
                reps.append(i)
            if len(reps) <= budget:
                break
            angle *= 2
        signs = np.sign(dirs @ dirs[reps].T)[np.arange(self.k), label]
        signs[signs == 0] = 1
        new = np.zeros((len(reps), self.n))
        np.add.at(new, label, g * signs[:, None])
        out = Zonotope(new, self.n)
        if self.n > 1:
            u = sweep_directions(self.n)
            h0 = self.support(u)
            scale = max(h0.max(), np.finfo(float).tiny)
            out.merge_error = float(np.max(np.abs(out.support(u) - h0)) / scale)
        return out

    def __repr__(self):
        return f"Zonotope(n={self.n}, generators={self.k})"


def support_function(z: Zonotope, u) -> float:
    return z.support(u)


def minkowski_sum(a: Zonotope, b: Zonotope) -> Zonotope:
    if a.n != b.n:
        raise InvalidArgument(f"dimension mismatch {a.n} != {b.n}")
    return Zonotope(np.vstack([a.generators, b.generators]), a.n)


def convex_body_average(f: VectorSignal, q: Cube, merge: bool = True) -> Zonotope:
    """Discrete ``<<f>>_q``: generators ``(|cell ∩ q| / |q|) f(cell)``.

    ``f`` is extended by zero off its domain, so the divisor is the full ``|q|``.
    Exactly parallel generators are always combined; the budget merge applies
    only when more than :data:`GENERATOR_BUDGET` remain.
    """
    w = f.overlap_fractions(q).ravel() * f.cell_volume / q.volume
    keep = w > 0
    z = Zonotope(w[keep, None] * f.flat()[keep], f.n)
    if not merge or z.k <= 1:
        return z
    z = z.merged(angle=1e-9, budget=np.inf)
    return z.merged() if z.k > GENERATOR_BUDGET else z


# --- ellipsoids -------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    """``{A u : |u| <= 1}`` for a symmetric PSD ``A``."""

    shape: np.ndarray
    rank: int
    sandwich_factor: float = 1.0

    @property
    def n(self) -> int:
        return self.shape.shape[0]

    def support(self, u) -> np.ndarray | float:
        u = np.asarray(u, dtype=float)
        h = np.linalg.norm(np.atleast_2d(u) @ self.shape.T, axis=-1)
        return float(h[0]) if u.ndim == 1 else h

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Semi-axis lengths (descending) and orthonormal axis vectors as columns."""
        vals, vecs = np.linalg.eigh(self.shape)
        order = np.argsort(-vals, kind="stable")
        return np.clip(vals[order], 0, None), vecs[:, order]


def _barrier_weights(P: np.ndarray, gap: float = 1e-9) -> np.ndarray:
    """Near-optimal design weights from a log-barrier Newton solve of the primal problem.

    Primal: minimise ``-log det X`` subject to ``p_i^T X p_i <= 1``, linear in the
    ``r(r+1)/2`` free entries of ``X``. The barrier multipliers give the weights.
    """
    N, r = P.shape
    iu = np.triu_indices(r)
    basis = np.zeros((len(iu[0]), r, r))
    for k, (i, j) in enumerate(zip(*iu)):
        basis[k, i, j] = basis[k, j, i] = 1.0
    A = np.einsum("ni,kij,nj->nk", P, basis, P)
    X = np.eye(r) / (1.01 * float(np.max(np.einsum("ij,ij->i", P, P))))
    x = X[iu]
    t = 1.0
    while N / t > gap:
        for _ in range(50):
            X = np.einsum("k,kij->ij", x, basis)
            Xi = np.linalg.inv(X)
            XB = np.einsum("ij,kjl->kil", Xi, basis)
            slack = 1 - A @ x
            grad = -t * np.einsum("kii->k", XB) + A.T @ (1 / slack)
            hess = t * np.einsum("kij,lji->kl", XB, XB) + (A / slack[:, None] ** 2).T @ A
            step = -np.linalg.solve(hess, grad)
            dec = float(-grad @ step)
            if dec < 1e-12:
                break
            h = 1.0
            while True:
                xn = x + h * step
                Xn = np.einsum("k,kij->ij", xn, basis)
                if np.all(A @ xn < 1) and np.all(np.linalg.eigvalsh(Xn) > 0):
                    break
                h /= 2
            x = xn
        t *= 10
    u = 1 / (1 - A @ x)
    return u / u.sum()


def lowner_symmetric(P: np.ndarray, tol: float = 1e-9, max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    """Minimum-volume centered ellipsoid enclosing ``±P`` (rows of full rank ``r``).

    Returns ``(M, kappa)`` with ``M = sum u_i p_i p_i^T`` and
    ``kappa = max_i p_i^T M^{-1} p_i``; the ellipsoid ``{y : y^T (kappa M)^{-1} y <= 1}``
    encloses every point and ``M^{1/2} B ⊂ conv(±P)``. Iterates until
    ``kappa <= r (1 + tol)``.
    """
    P = np.asarray(P, dtype=float)
    # antipodes describe the same constraint and would stall the pairwise step
    P = _canonical_sign(P[np.linalg.norm(P, axis=1) > 0])
    P = np.unique(P, axis=0)
    N, r = P.shape
    u = _barrier_weights(P)
    M = P.T @ (P * u[:, None])
    kappa = np.inf
    for _ in range(max_iter):
        PA = P @ np.linalg.inv(M)
        lev = np.einsum("ij,ij->i", PA, P)
        j = int(np.argmax(lev))
        kappa = float(lev[j])
        if kappa <= r * (1 + tol):
            break
        # pairwise step: move weight from the weakest supported point to the worst one
        sup = np.flatnonzero(u > 0)
        a = int(sup[np.argmin(lev[sup])])
        al, be, ga = lev[j], lev[a], float(PA[j] @ P[a])
        den = 2 * (al * be - ga * ga)
        t = (al - be) / den if den > 0 else u[a]
        t = min(max(t, 0.0), u[a])
        u[j] += t
        u[a] -= t
        M = M + t * (np.outer(P[j], P[j]) - np.outer(P[a], P[a]))
    return M, kappa


def _span(g: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis (columns) of the span of the rows of ``g``."""
    if g.shape[0] == 0:
        return np.zeros((g.shape[1], 0))
    big = np.abs(g).max()
    if big == 0:
        return np.zeros((g.shape[1], 0))
    U, S, _ = np.linalg.svd(g.T / big, full_matrices=False)
    r = int(np.sum(S > rtol * S[0]))
    return U[:, :r]


def _dedupe_directions(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    big = np.abs(a).max(axis=1, keepdims=True) if len(a) else np.zeros((0, 1))
    a, big = a[big[:, 0] > 0], big[big[:, 0] > 0]
    unit = a / big
    nrm = big[:, 0] * np.linalg.norm(unit, axis=1)
    keep = nrm > tol * nrm.max() if len(a) else nrm > 0
    if not np.any(keep):
        return a[:0]
    unit = unit[keep]
    a = _canonical_sign(unit / np.linalg.norm(unit, axis=1, keepdims=True))
    keys = np.round(a / 1e-10).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return a[np.sort(idx)]


def facet_normals(g: np.ndarray) -> np.ndarray:
    """Unit normals (one per antipodal pair) of the facets of a full-rank zonotope in R^r."""
    k, r = g.shape
    if r == 1:
        return np.ones((1, 1))
    if r == 2:
        return _dedupe_directions(np.stack([-g[:, 1], g[:, 0]], axis=1))
    if r == 3:
        gd = _dedupe_directions(g)
        i, j = np.triu_indices(len(gd), 1)
        return _dedupe_directions(np.cross(gd[i], gd[j]))
    raise InvalidArgument("only ambient dimensions n <= 3 are supported")


def john_ellipsoid(body: Zonotope, tol: float = 1e-9) -> Ellipsoid:
    """Maximal-volume ellipsoid inscribed in a zonotope, within its generator span."""
    n = body.n
    U = _span(body.generators)
    r = U.shape[1]
    if r == 0:
        return Ellipsoid(np.zeros((n, n)), 0, 1.0)
    # the problem is scale covariant; work with unit-size generators
    scale = float(np.abs(body.generators).max())
    gr = body.generators / scale @ U
    a = facet_normals(gr)
    h = np.abs(a @ gr.T).sum(axis=1)
    M, kappa = lowner_symmetric(a / h[:, None], tol=tol)
    vals, vecs = np.linalg.eigh(kappa * M)
    Ar = (vecs / np.sqrt(vals)) @ vecs.T
    A = scale * (U @ Ar @ U.T)
    return Ellipsoid((A + A.T) / 2, r, math.sqrt(kappa))


# --- membership -------------------------------------------------------------------


def _membership_facets(p: np.ndarray, g: np.ndarray) -> float:
    scale = float(np.abs(g).max())
    g, p = g / scale, p / scale
    U = _span(g)
    pr = U.T @ p
    if np.linalg.norm(p - U @ pr) > 1e-9 * np.linalg.norm(p):
        return math.inf
    gr = g @ U
    a = facet_normals(gr)
    h = np.abs(a @ gr.T).sum(axis=1)
    return float(np.max(np.abs(a @ pr) / h))


def _membership_lp(p: np.ndarray, g: np.ndarray) -> float:
    scale = float(np.abs(g).max())
    g, p = g / scale, p / scale
    k, n = g.shape
    # variables (t_1..t_k, c): minimise c with G^T t = p and |t_i| <= c
    cost = np.zeros(k + 1)
    cost[-1] = 1.0
    eye = np.eye(k)
    A_ub = np.vstack([np.hstack([eye, -np.ones((k, 1))]), np.hstack([-eye, -np.ones((k, 1))])])
    A_eq = np.hstack([g.T, np.zeros((n, 1))])
    res = linprog(
        cost,
        A_ub=A_ub,
        b_ub=np.zeros(2 * k),
        A_eq=A_eq,
        b_eq=p,
        bounds=[(None, None)] * k + [(0, None)],
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        return math.inf
    if res.status != 0:
        raise RuntimeError(f"membership LP failed: {res.message}")
    return float(res.x[-1])


def membership_scale(point, z: Zonotope, method: str = "sweep") -> float:
    """``inf {c >= 0 : point in c z}``; ``inf`` when ``point`` is outside the span of ``z``.

    ``method="sweep"`` maximises ``<point, a> / h(a)`` over the exact facet
    normals of ``z`` in its span; ``method="lp"`` solves the linear program over
    generator coefficients.
    """
    p = np.asarray(point, dtype=float).ravel()
    if p.size != z.n:
        raise InvalidArgument("point and body dimensions differ")
    if not np.any(p):
        return 0.0
    if z.k == 0:
        return math.inf
    if method == "sweep":
        return _membership_facets(p, z.generators)
    if method == "lp":
        return _membership_lp(p, z.generators)
    raise InvalidArgument(f"unknown method {method!r}")


def sparse_operator_eval(fam, f: VectorSignal, x) -> Zonotope:
    """Minkowski sum of ``<<f>>_Q`` over the cubes ``Q`` of ``fam`` containing ``x``."""
    out = Zonotope.zero(f.n)
    for q in fam.cubes:
        if q.contains_point(x):
            out = minkowski_sum(out, convex_body_average(f, q))
    return out


# --- direction sets ---------------------------------------------------------------


def _icosphere(subdivisions: int) -> np.ndarray:
    t = (1 + math.sqrt(5)) / 2
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts)


@lru_cache(maxsize=4)
def sweep_directions(n: int) -> np.ndarray:
    """Unit directions: 720 angles in the plane, a 2562-point icosphere in space."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = np.arange(720) * (2 * np.pi / 720)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if n == 3:
        return _icosphere(4)
    raise InvalidArgument("only n <= 3 is supported")


def verification_directions(n: int, count: int = 360, offset: float = 0.5) -> np.ndarray:
    """Directions disjoint from the sweep set: shifted angles (n=2), a Fibonacci sphere (n=3)."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = (np.arange(count) + offset) * (2 * np.pi / count)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    i = np.arange(count) + 0.5
    z = 1 - 2 * i / count
    phi = math.pi * (3 - math.sqrt(5)) * i
    s = np.sqrt(1 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
