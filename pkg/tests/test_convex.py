import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from czvar.convex import (
    Zonotope,
    convex_body_average,
    facet_normals,
    john_ellipsoid,
    lowner_symmetric,
    membership_scale,
    minkowski_sum,
    sparse_operator_eval,
    support_function,
    sweep_directions,
    verification_directions,
)
from czvar.errors import InvalidArgument
from czvar.grid import Cube, VectorSignal

from conftest import random_vector

gen_arrays = st.integers(1, 7).flatmap(
    lambda k: st.lists(
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=2), min_size=k, max_size=k
    )
)


def enumerated_support(g, u):
    """Oracle: max of <sum phi_i g_i, u> over all sign patterns."""
    g = np.asarray(g, float)
    return max(float(np.asarray(phi) @ g @ u) for phi in itertools.product((-1, 1), repeat=len(g)))


def random_zonotope(rng, n, k):
    return Zonotope(rng.normal(size=(k, n)))


def john_oracle(body):
    """Independent check in the plane: SLSQP on log det over symmetric 2x2 matrices.

    An ellipsoid lies in a polytope iff its support is below the polytope's on
    every facet normal.
    """
    a = facet_normals(body.generators)
    h = body.support(a)

    def mat(v):
        return np.array([[v[0], v[1]], [v[1], v[2]]])

    cons = {"type": "ineq", "fun": lambda v: h - np.linalg.norm(a @ mat(v), axis=1)}
    s = 0.5 * h.min()
    res = minimize(
        lambda v: -math.log(max(np.linalg.det(mat(v)), 1e-300)),
        [s, 0.0, s],
        constraints=[cons],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    return -res.fun


class TestConvexBodyAverage:
    def test_zero(self, unit):
        f = VectorSignal(unit, np.zeros((8, 2)))
        assert convex_body_average(f, unit).k == 0

    def test_constant_is_segment(self, unit):
        v = np.array([0.5, -1.25])
        f = VectorSignal(unit, np.tile(v, (16, 1)))
        z = convex_body_average(f, unit)
        assert z.k == 1
        assert np.allclose(np.abs(z.generators[0]), np.abs(v), rtol=1e-14)

    def test_two_cell_square(self, unit):
        f = VectorSignal(unit, np.array([[1.0, 0.0], [0.0, 1.0]]))
        z = convex_body_average(f, unit)
        pts = {tuple(np.asarray(phi) @ z.generators) for phi in itertools.product((-1, 1), repeat=2)}
        assert pts == {(0.5, 0.5), (0.5, -0.5), (-0.5, 0.5), (-0.5, -0.5)}
        for u in sweep_directions(2)[::37]:
            assert z.support(u) == pytest.approx(enumerated_support(z.generators, u), abs=1e-15)

    def test_partial_overlap(self, domain1, rng):
        f = random_vector(rng, domain1, 16, 2)
        q = Cube.from_bounds([0.1], 0.5)
        z = convex_body_average(f, q, merge=False)
        # generators carry the overlap fraction of their cell
        assert np.abs(z.generators).sum(axis=0) == pytest.approx(
            (f.overlap_fractions(q)[:, None] * np.abs(f.values)).sum(axis=0) * f.cell_volume / q.volume
        )

    @pytest.mark.parametrize("c", [-3.0, 0.5, 2.0])
    def test_scaling(self, domain1, rng, c):
        f = random_vector(rng, domain1, 32, 3)
        g = VectorSignal(domain1, c * f.values)
        q = Cube.from_bounds([0.0], 1.0)
        u = sweep_directions(3)
        assert np.allclose(convex_body_average(g, q).support(u), abs(c) * convex_body_average(f, q).support(u))


class TestSupport:
    def test_zero_body(self):
        assert Zonotope.zero(2).support([1.0, 2.0]) == 0.0

    def test_single_generator(self):
        g = np.array([3.0, 4.0])
        assert support_function(Zonotope([g]), g / 5) == pytest.approx(5.0)

    def test_zero_direction(self):
        with pytest.raises(InvalidArgument):
            Zonotope([[1.0, 0.0]]).support([0.0, 0.0])

    @given(gen_arrays, st.floats(0, 2 * math.pi))
    def test_even_homogeneous(self, g, th):
        z = Zonotope(g)
        u = np.array([math.cos(th), math.sin(th)])
        assert z.support(u) == z.support(-u)
        assert z.support(2 * u) == pytest.approx(2 * z.support(u), rel=1e-15, abs=1e-300)

    @given(gen_arrays, st.floats(0, 2 * math.pi))
    def test_matches_enumeration(self, g, th):
        u = np.array([math.cos(th), math.sin(th)])
        assert Zonotope(g).support(u) == pytest.approx(enumerated_support(g, u), rel=1e-12, abs=1e-12)


class TestMinkowski:
    def test_identity(self, rng):
        z = random_zonotope(rng, 2, 4)
        s = minkowski_sum(z, Zonotope.zero(2))
        assert np.array_equal(s.generators, z.generators)

    def test_orthogonal_segments(self):
        s = minkowski_sum(Zonotope([[1.0, 0.0]]), Zonotope([[0.0, 1.0]]))
        pts = {tuple(np.asarray(phi) @ s.generators) for phi in itertools.product((-1, 1), repeat=2)}
        assert pts == {(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)}

    def test_additive_support(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 4))
            a, b = random_zonotope(rng, n, 3), random_zonotope(rng, n, 5)
            u = rng.normal(size=n)
            assert minkowski_sum(a, b).support(u) == pytest.approx(a.support(u) + b.support(u), rel=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            minkowski_sum(Zonotope.zero(2), Zonotope.zero(3))


class TestMerge:
    def test_parallel_exact(self, rng):
        v = rng.normal(size=3)
        z = Zonotope(np.outer([1.0, -2.0, 0.5, 3.0], v))
        m = z.merged()
        assert m.k == 1
        u = sweep_directions(3)
        assert np.max(np.abs(m.support(u) - z.support(u))) <= 1e-12 * z.support(u).max()

    def test_budget(self, rng):
        z = random_zonotope(rng, 2, 600)
        m = z.merged(budget=64)
        assert m.k <= 64
        assert 0 < m.merge_error < 0.05

    def test_body_average_merge(self, domain1, rng):
        f = random_vector(rng, domain1, 1024, 2)
        z = convex_body_average(f, domain1)
        raw = convex_body_average(f, domain1, merge=False)
        u = verification_directions(2)
        assert z.k <= 256
        err = np.max(np.abs(z.support(u) - raw.support(u))) / raw.support(u).max()
        assert err <= 10 * z.merge_error + 1e-12


class TestJohn:
    def test_fine_disk(self):
        th = (np.arange(400) + 0.5) * math.pi / 400
        g = np.stack([np.cos(th), np.sin(th)], axis=1) * (math.pi / 2 / 400)
        E = john_ellipsoid(Zonotope(g))
        assert np.max(np.abs(E.shape - np.eye(2))) <= 1e-3

    def test_square_gives_disk(self):
        E = john_ellipsoid(Zonotope([[1.0, 0.0], [0.0, 1.0]]))
        assert np.allclose(E.shape, np.eye(2), atol=1e-6)
        assert E.rank == 2

    def test_segment(self):
        v = np.array([1.0, 2.0])
        E = john_ellipsoid(Zonotope([v, 0.5 * v]))
        assert E.rank == 1
        for u in sweep_directions(2)[::17]:
            assert E.support(u) == pytest.approx(1.5 * abs(v @ u), abs=1e-9)

    def test_zero_body(self):
        E = john_ellipsoid(Zonotope.zero(3))
        assert E.rank == 0 and not np.any(E.shape)

    @pytest.mark.parametrize("n,k", [(2, 3), (2, 9), (3, 4), (3, 12)])
    def test_sandwich(self, rng, n, k):
        for _ in range(5):
            z = random_zonotope(rng, n, k)
            E = john_ellipsoid(z)
            u = verification_directions(n)
            hE, hK = E.support(u), z.support(u)
            assert np.all(hE <= hK * (1 + 1e-9))
            assert np.all(hK <= math.sqrt(n) * hE * (1 + 1e-6))
            assert E.sandwich_factor <= math.sqrt(n) * (1 + 1e-6)

    def test_rank_two_in_space(self, rng):
        B = rng.normal(size=(2, 3))
        z = Zonotope(rng.normal(size=(5, 2)) @ B)
        E = john_ellipsoid(z)
        assert E.rank == 2
        u = verification_directions(3)
        assert np.all(E.support(u) <= z.support(u) * (1 + 1e-9))

    def test_against_slsqp(self, rng):
        for _ in range(5):
            z = random_zonotope(rng, 2, 5)
            E = john_ellipsoid(z)
            assert math.log(np.linalg.det(E.shape)) == pytest.approx(john_oracle(z), abs=1e-5)

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_lowner_encloses(self, rng, r):
        P = rng.normal(size=(40, r))
        M, kappa = lowner_symmetric(P)
        assert kappa <= r * (1 + 1e-9)
        lev = np.einsum("ij,ij->i", P @ np.linalg.inv(kappa * M), P)
        assert np.all(lev <= 1 + 1e-9)

    def test_lowner_antipodes(self, rng):
        P = rng.normal(size=(10, 2))
        M1, _ = lowner_symmetric(P)
        M2, _ = lowner_symmetric(np.vstack([P, -P]))
        assert np.allclose(M1, M2, atol=1e-7)


class TestMembership:
    def test_zero_point(self, rng):
        assert membership_scale([0.0, 0.0], random_zonotope(rng, 2, 3)) == 0.0

    @pytest.mark.parametrize("method", ["sweep", "lp"])
    def test_vertex(self, rng, method):
        z = random_zonotope(rng, 2, 4)
        assert membership_scale(z.generators.sum(axis=0), z, method) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("n", [2, 3])
    def test_lp_agrees(self, rng, n):
        for _ in range(50):
            z = random_zonotope(rng, n, 5)
            p = rng.normal(size=n)
            assert membership_scale(p, z, "lp") == pytest.approx(membership_scale(p, z, "sweep"), abs=1e-6)

    def test_certificate(self, rng):
        for _ in range(20):
            z = random_zonotope(rng, 2, 4)
            p = rng.normal(size=2)
            c = membership_scale(p, z)
            u = sweep_directions(2)
            assert np.all(c * z.support(u) >= u @ p - 1e-12)

    @pytest.mark.parametrize("method", ["sweep", "lp"])
    def test_outside_span(self, method):
        z = Zonotope([[1.0, 1.0], [2.0, 2.0]])
        assert membership_scale([1.0, -1.0], z, method) == math.inf

    def test_empty_body(self):
        assert membership_scale([1.0, 0.0], Zonotope.zero(2)) == math.inf

    def test_errors(self, rng):
        z = random_zonotope(rng, 2, 2)
        with pytest.raises(InvalidArgument):
            membership_scale([1.0, 2.0, 3.0], z)
        with pytest.raises(InvalidArgument):
            membership_scale([1.0, 2.0], z, "guess")


class TestSparseOperator:
    def test_no_cube(self, domain1, rng):
        f = random_vector(rng, domain1, 16, 2)
        fam = SimpleNamespace(cubes=[Cube.from_bounds([0.0], 1.0)])
        assert sparse_operator_eval(fam, f, [2.5]).k == 0

    def test_single_cube(self, domain1, rng):
        f = random_vector(rng, domain1, 16, 2)
        q = Cube.from_bounds([0.0], 1.0)
        z = sparse_operator_eval(SimpleNamespace(cubes=[q]), f, [0.5])
        assert np.array_equal(z.generators, convex_body_average(f, q).generators)

    def test_nested_pair(self, domain1, rng):
        f = random_vector(rng, domain1, 64, 2)
        big, small = Cube.from_bounds([-1.0], 4.0), Cube.from_bounds([0.0], 1.0)
        z = sparse_operator_eval(SimpleNamespace(cubes=[big, small]), f, [0.5])
        u = verification_directions(2)
        expected = convex_body_average(f, big).support(u) + convex_body_average(f, small).support(u)
        assert np.allclose(z.support(u), expected, rtol=1e-12)
