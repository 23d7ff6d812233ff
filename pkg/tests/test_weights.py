import itertools
import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.linalg import fractional_matrix_power

from czvar.errors import InvalidArgument, InvalidWeight, RankDeficiency
from czvar.grid import Cube, ScalarSignal, VectorSignal, cube_at, dilate
from czvar.kernels import TruncationLadder, hilbert_kernel
from czvar.variation import VariationParams, vector_variation_field
from czvar.weights import (
    MatrixWeight,
    WeightConstants,
    ainf_dual,
    ainf_sc,
    ap_constant,
    bound_exponent,
    cube_family,
    dual_pairing_check,
    fujii_wilson,
    matrix_power,
    reducing_normalization,
    reducing_operator,
    reducing_pair,
    rs_exponents,
    scalar_ap_constant,
    scalar_restriction_check,
    spectral_norm,
    verify_weighted_bound,
    weighted_lp_norm,
)

from conftest import random_vector

DOM = Cube.from_bounds([-1.0], 4.0)
Q0 = cube_at(DOM, 2, (1,))
SPD = np.array([[2.0, 0.5], [0.5, 1.0]])


def rotated(res=64, a=0.5, p=2.0, omega=3.0):
    return MatrixWeight("rotated_diag", DOM, res, 2, alphas=[a * (p - 1), -a], omega=omega, x0=[0.5])


def explicit_field(w):
    """Oracle: rebuild W at every cell from the model formula, without the cached decomposition."""
    x = (np.arange(w.resolution) + 0.5) * DOM.side / w.resolution + DOM.lower[0]
    r = np.abs(x - w.params["x0"][0])
    out = []
    for xi, ri in zip(x, r):
        th = w.params["omega"] * xi
        U = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        out.append(U @ np.diag(ri ** np.asarray(w.params["alphas"])) @ U.T)
    return np.array(out)


def ap_oracle(w, p):
    """Double loop over the cube family with scipy fractional powers."""
    W = explicit_field(w)
    A = [fractional_matrix_power(m, 1 / p).real for m in W]
    B = [fractional_matrix_power(m, -1 / p).real for m in W]
    pp = p / (p - 1)
    best = 0.0
    for _, cells in cube_family(w.domain, w.resolution):
        outer = 0.0
        for x in cells:
            inner = sum(np.linalg.norm(A[x] @ B[t], 2) ** pp for t in cells) / len(cells)
            outer += inner ** (p / pp)
        best = max(best, outer / len(cells))
    return best


def family_members(res):
    L = res.bit_length() - 1
    for lev in range(L + 1):
        b = res // 2**lev
        for i in range(2**lev):
            yield i * b, (i + 1) * b
            yield max(0, (i - 1) * b), min(res, (i + 2) * b)


def fujii_oracle(v):
    """sup over dyadic Q of w(Q)^{-1} sum_{x in Q} max_{R ∋ x} avg_R(w chi_Q), R over the whole family."""
    res = v.size
    best = 0.0
    L = res.bit_length() - 1
    for lev in range(L + 1):
        b = res // 2**lev
        for i in range(2**lev):
            lo, hi = i * b, (i + 1) * b
            wq = np.zeros(res)
            wq[lo:hi] = v[lo:hi]
            total = 0.0
            for x in range(lo, hi):
                total += max(wq[a:c].mean() for a, c in family_members(res) if a <= x < c)
            best = max(best, total / v[lo:hi].sum())
    return best


class TestMatrixPower:
    def test_first_power(self):
        w = rotated()
        W = explicit_field(w)
        for c in (0, 17, 40):
            assert np.allclose(matrix_power(w, c, 1.0), W[c], rtol=1e-12, atol=1e-14)

    def test_zeroth_power(self):
        assert np.array_equal(matrix_power(rotated(), 5, 0.0), np.eye(2))

    def test_square_root(self):
        w = rotated()
        for c in range(0, 64, 7):
            h = matrix_power(w, c, 0.5)
            assert np.allclose(h @ h, matrix_power(w, c, 1.0), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("s", [1 / 3, -0.5, 2.0])
    def test_against_scipy(self, s):
        w = rotated()
        W = explicit_field(w)
        for c in (3, 30):
            assert np.allclose(matrix_power(w, c, s), fractional_matrix_power(W[c], s).real, rtol=1e-10)

    def test_constant_exact(self):
        w = MatrixWeight("constant_pd", DOM, 8, 2, matrix=SPD)
        assert np.array_equal(matrix_power(w, 3, 1.0), SPD)

    def test_cell_range(self):
        with pytest.raises(InvalidArgument):
            matrix_power(rotated(), 64, 1.0)

    def test_singular_weight(self):
        # x0 at a cell center puts a zero eigenvalue on the grid
        with pytest.raises(InvalidWeight):
            MatrixWeight("scalar_power", DOM, 8, 2, alpha=0.5, x0=[0.25])

    def test_not_symmetric(self):
        with pytest.raises(InvalidWeight):
            MatrixWeight("constant_pd", DOM, 8, 2, matrix=[[1.0, 1.0], [0.0, 1.0]])

    def test_unknown_model(self):
        with pytest.raises(InvalidArgument):
            MatrixWeight("fractal", DOM, 8, 2)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_spectral_norm(self, rng, n):
        B = rng.normal(size=(50, n, n))
        assert np.allclose(spectral_norm(B), np.linalg.norm(B, 2, axis=(-2, -1)), rtol=1e-12)


class TestAp:
    def test_identity(self):
        assert ap_constant(MatrixWeight.identity(DOM, 32, 2), 2.0) == 1.0

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_constant(self, p):
        w = MatrixWeight("constant_pd", DOM, 16, 2, matrix=SPD)
        assert ap_constant(w, p) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_double_loop(self, p):
        w = rotated(res=8, a=0.7, p=p)
        assert ap_constant(w, p) == pytest.approx(ap_oracle(w, p), rel=1e-10)

    def test_scalar_reduction(self):
        w = MatrixWeight("scalar_power", DOM, 64, 2, alpha=0.5, x0=[0.5])
        v = np.abs((np.arange(64) + 0.5) / 16 - 1 - 0.5) ** 0.5
        assert ap_constant(w, 2.0) == pytest.approx(scalar_ap_constant(v, 2.0, DOM, 64), rel=1e-12)

    def test_grows_with_alpha(self):
        vals = [ap_constant(MatrixWeight("scalar_power", DOM, 64, 1, alpha=a, x0=[0.5]), 2.0) for a in (0.2, 0.5, 0.8)]
        assert 1 < vals[0] < vals[1] < vals[2] < math.inf

    def test_refinement_divergence(self):
        # past alpha = p - 1 the local integral of w^{-1} diverges
        def seq(a):
            return [ap_constant(MatrixWeight("scalar_power", DOM, res, 1, alpha=a, x0=[0.5]), 2.0) for res in (32, 64, 128)]

        tame, wild = seq(0.5), seq(1.5)
        assert tame[-1] / tame[0] < 1.05
        assert wild[1] / wild[0] > 1.3 and wild[2] / wild[1] > 1.3

    def test_at_least_one(self):
        for a in (0.1, 0.6):
            assert ap_constant(rotated(a=a), 2.0) >= 1 - 1e-12

    @pytest.mark.parametrize("p", [1.0, math.inf])
    def test_bad_p(self, p):
        with pytest.raises(InvalidArgument):
            ap_constant(MatrixWeight.identity(DOM, 8, 2), p)


class TestRestriction:
    def test_identity(self):
        assert scalar_restriction_check(MatrixWeight.identity(DOM, 32, 2), 2.0) == pytest.approx(1.0, abs=1e-14)

    def test_axis_direction(self):
        w = rotated(a=0.5, p=2.0, omega=0.0)
        ap = ap_constant(w, 2.0)
        r = np.abs((np.arange(64) + 0.5) / 16 - 1 - 0.5)
        expected = scalar_ap_constant(r**0.5, 2.0, DOM, 64) / ap
        assert scalar_restriction_check(w, 2.0, directions=np.array([[1.0, 0.0]]), ap=ap) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("p", [2.0, 3.0])
    @pytest.mark.parametrize("a", [0.2, 0.8])
    def test_random_directions(self, p, a):
        assert scalar_restriction_check(rotated(a=a, p=p), p, directions=64) <= 1 + 1e-9


class TestFujiiWilson:
    def test_constant(self):
        assert fujii_wilson(ScalarSignal(DOM, np.ones(64))) == pytest.approx(1.0, abs=1e-14)

    def test_checker(self):
        v = 1.0 + (np.arange(64) // 4 % 2)
        assert fujii_wilson(ScalarSignal(DOM, v)) == pytest.approx(fujii_oracle(v), rel=1e-12)

    def test_random(self, rng):
        for _ in range(3):
            v = rng.uniform(0.1, 3.0, size=64)
            got = fujii_wilson(ScalarSignal(DOM, v))
            assert got >= 1 - 1e-12
            assert got == pytest.approx(fujii_oracle(v), rel=1e-12)

    def test_nonpositive(self):
        with pytest.raises(InvalidWeight):
            fujii_wilson(ScalarSignal(DOM, np.zeros(8)))

    @pytest.mark.parametrize("p", [2.0, 3.0])
    @pytest.mark.parametrize("a", [0.2, 0.5, 0.95])
    def test_below_ap_on_family(self, p, a):
        w = rotated(res=64, a=a, p=p)
        assert ainf_sc(w, p, directions=8) <= ap_constant(w, p)

    def test_near_constant_exceeds_ap(self):
        # first order in the perturbation against second order for A_p
        w = MatrixWeight("scalar_power", DOM, 64, 1, alpha=0.02, x0=[0.5])
        assert ainf_sc(w, 2.0) > ap_constant(w, 2.0)

    def test_dual_is_inverse_power(self):
        # for n = 1, |W^{-1/p} e|^{p'} = w^{-p'/p}
        w = MatrixWeight("scalar_power", DOM, 32, 1, alpha=0.4, x0=[0.5])
        r = np.abs((np.arange(32) + 0.5) / 8 - 1 - 0.5)
        assert ainf_dual(w, 3.0) == pytest.approx(fujii_wilson(ScalarSignal(DOM, r ** (-0.4 * 0.5))), rel=1e-12)


class TestRs:
    def test_unit_inputs(self):
        c = WeightConstants(ap=1, ainf_sc=1, ainf_dual=1, d=1)
        assert c.r == Fraction(4097, 4096) and c.s == Fraction(4097, 4096)

    def test_two_dimensions(self):
        r, s = rs_exponents(WeightConstants(1, Fraction(3), 2, d=2), 2)
        assert r == 1 + Fraction(1, 2**13 * 2) and s == 1 + Fraction(1, 2**13 * 3)

    def test_monotone(self):
        vals = [rs_exponents(WeightConstants(1, c, c), 1)[0] for c in (1.0, 1.5, 3.0, 10.0)]
        assert all(a > b > 1 for a, b in zip(vals, vals[1:]))

    def test_positive(self):
        with pytest.raises(InvalidArgument):
            WeightConstants(1, 0, 1)


class TestReducing:
    def test_identity(self):
        R = reducing_operator(MatrixWeight.identity(DOM, 32, 2), Q0, 2.0)
        assert np.allclose(R.matrix, np.eye(2), atol=1e-6)

    @pytest.mark.parametrize("side,s", [("primal", 1 / 3), ("dual", -1 / 3)])
    def test_constant(self, side, s):
        w = MatrixWeight("constant_pd", DOM, 32, 2, matrix=SPD)
        R = reducing_operator(w, Q0, 3.0, side)
        assert np.allclose(R.matrix, fractional_matrix_power(SPD, s).real, atol=1e-6)

    @pytest.mark.parametrize("side", ["primal", "dual"])
    def test_scalar(self, side):
        w = MatrixWeight("scalar_power", DOM, 64, 1, alpha=0.5, x0=[0.5])
        r = np.abs((np.arange(64) + 0.5) / 16 - 1 - 0.5)[16:32]
        ex = 2.0 if side == "primal" else 2.0
        s = 0.5 if side == "primal" else -0.5
        expected = ((r ** (0.5 * s)) ** ex).mean() ** (1 / ex)
        assert reducing_operator(w, Q0, 2.0, side).matrix[0, 0] == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_product_at_least_one(self, p):
        w = rotated(res=64, a=0.8, p=p)
        cubes = [Q0, dilate(Q0, 3), *[cube_at(DOM, 3, (i,)) for i in range(8)]]
        for q in cubes:
            assert reducing_pair(w, q, p).product_norm >= 1 - 1e-6

    def test_certified_equivalence(self):
        w = rotated(res=64, a=0.8, p=3.0)
        for side in ("primal", "dual"):
            R = reducing_operator(w, Q0, 3.0, side)
            assert R.lower >= 1 - 1e-6
            assert R.upper <= math.sqrt(2) * (1 + 1e-6)

    def test_normalization_identity(self):
        assert reducing_normalization(MatrixWeight.identity(DOM, 16, 2), Q0, 2.0, 2.0) == pytest.approx(1.0, abs=1e-6)

    def test_errors(self):
        w = MatrixWeight.identity(DOM, 16, 2)
        with pytest.raises(InvalidArgument):
            reducing_operator(w, Q0, 2.0, "sideways")
        with pytest.raises(InvalidArgument):
            reducing_operator(w, Q0, 2.0, exponent=0.5)
        with pytest.raises(RankDeficiency):
            reducing_operator(w, Cube.from_bounds([10.0], 1.0), 2.0)


class TestWeightedNorms:
    def test_identity(self, rng):
        f = random_vector(rng, DOM, 32, 2)
        direct = ((np.linalg.norm(f.values, axis=1) ** 3).sum() * f.cell_volume) ** (1 / 3)
        assert weighted_lp_norm(f, MatrixWeight.identity(DOM, 32, 2), 3.0) == pytest.approx(direct, rel=1e-13)

    def test_zero(self):
        assert weighted_lp_norm(VectorSignal(DOM, np.zeros((32, 2))), rotated(res=32), 2.0) == 0.0

    def test_diagonal_decouples(self, rng):
        w = rotated(res=32, a=0.5, p=2.0, omega=0.0)
        g = rng.normal(size=32)
        f = VectorSignal(DOM, np.stack([g, np.zeros(32)], axis=1))
        r = np.abs((np.arange(32) + 0.5) / 8 - 1 - 0.5)
        expected = ((r**0.5 * g**2).sum() * f.cell_volume) ** 0.5
        assert weighted_lp_norm(f, w, 2.0) == pytest.approx(expected, rel=1e-12)

    def test_grid_mismatch(self, rng):
        with pytest.raises(InvalidArgument):
            weighted_lp_norm(random_vector(rng, DOM, 16, 2), rotated(res=32), 2.0)

    def test_bound_exponent(self):
        assert bound_exponent(2.0) == 1.5
        assert bound_exponent(3.0) == pytest.approx(1 + 1 / 2 - 1 / 3)


class TestWeightedBound:
    VP = VariationParams(3.0, TruncationLadder.spanning(2.0, 0.25, 6))

    def test_zero(self):
        rep = verify_weighted_bound(hilbert_kernel(), rotated(res=32), 2.0, self.VP, [VectorSignal(DOM, np.zeros((32, 2)))])
        assert rep.ratios == [0.0]

    def test_identity_path(self, rng):
        corpus = [random_vector(rng, DOM, 32, 2, support=Q0) for _ in range(3)]
        w = MatrixWeight.identity(DOM, 32, 2)
        rep = verify_weighted_bound(hilbert_kernel(), w, 2.0, self.VP, corpus)
        for f, ratio in zip(corpus, rep.ratios):
            V = vector_variation_field(hilbert_kernel(), f, self.VP)
            direct = math.sqrt((V**2).sum() / (f.values**2).sum())
            assert ratio == pytest.approx(direct, rel=1e-12)
        assert rep.ap == 1.0 and rep.normalized == rep.max_ratio


class TestDualPairing:
    def test_zero(self, rng):
        fam = SimpleNamespace(cubes=[Q0])
        z = VectorSignal(DOM, np.zeros((16, 2)))
        rep = dual_pairing_check(fam, MatrixWeight.identity(DOM, 16, 2), 2.0, z, random_vector(rng, DOM, 16, 2), WeightConstants(1, 1, 1))
        assert rep.ratio == 0.0

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_single_cube_holder(self, rng, p):
        f, g = random_vector(rng, DOM, 16, 2, support=Q0), random_vector(rng, DOM, 16, 2, support=Q0)
        rep = dual_pairing_check(SimpleNamespace(cubes=[Q0]), MatrixWeight.identity(DOM, 16, 2), p, f, g, WeightConstants(1, 1, 1))
        m = f.cube_mask(Q0)
        af, ag = f.values[m].mean(axis=0), g.values[m].mean(axis=0)
        pp = p / (p - 1)
        nf = ((np.linalg.norm(f.values, axis=1) ** p).sum() * f.cell_volume) ** (1 / p)
        ng = ((np.linalg.norm(g.values, axis=1) ** pp).sum() * g.cell_volume) ** (1 / pp)
        expected = abs(af @ ag) * Q0.volume / (nf * ng)
        assert rep.ratio == pytest.approx(expected, rel=1e-12)
        assert rep.ratio <= 1
        assert rep.r == rep.s == pytest.approx(1 + 2**-12)
