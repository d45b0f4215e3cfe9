import numpy as np
import pytest

from homoglab.operators import (Bellman, InvalidInputError, Linear,
                                LocalOperator, OutOfWindowError, PucciShift,
                                SymMatrix, constant_field, ellipticity_report,
                                pucci, sym_eig)
from conftest import random_sym


class TestPucci:
    def test_identity_plus(self):
        assert pucci("+", np.eye(2), 2.0) == -2.0

    def test_mixed_signs(self):
        assert pucci("+", np.diag([1.0, -1.0]), 2.0) == 1.0

    def test_identity_minus(self):
        assert pucci("-", np.eye(2), 2.0) == -4.0

    def test_zero_matrix(self):
        for sign in ("+", "-"):
            assert pucci(sign, np.zeros((2, 2)), 5.0) == 0.0

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            pucci("+", np.array([[np.nan, 0.0], [0.0, 1.0]]), 2.0)

    def test_bad_sign(self):
        with pytest.raises(InvalidInputError):
            pucci("x", np.eye(2), 2.0)

    def test_duality(self):
        # pucci(-, A) = -pucci(+, -A)
        rng = np.random.default_rng(3)
        for _ in range(200):
            A = random_sym(rng, scale=3.0)
            assert pucci("-", A, 2.7) == pytest.approx(-pucci("+", -A.a, 2.7), abs=1e-12)

    def test_duality_3d(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            A = random_sym(rng, d=3, scale=2.0)
            assert pucci("-", A, 1.9) == pytest.approx(-pucci("+", -A.a, 1.9), abs=1e-11)


class TestSymMatrix:
    def test_plus_minus_split(self):
        rng = np.random.default_rng(5)
        for d in (2, 3):
            for _ in range(40):
                A = random_sym(rng, d=d, scale=2.0)
                P, N = A.plus_minus()
                assert np.allclose(P.a - N.a, A.a, atol=1e-10)
                assert np.abs(P.a @ N.a).max() < 1e-9
                assert sym_eig(P.a)[0][0] >= -1e-10
                assert sym_eig(N.a)[0][0] >= -1e-10

    def test_jacobi_matches_lapack(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            A = random_sym(rng, d=4, scale=3.0)
            w, V = sym_eig(A.a)
            w_ref = np.linalg.eigvalsh(A.a)
            assert np.allclose(w, w_ref, atol=1e-9)
            assert np.abs(V @ np.diag(w) @ V.T - A.a).max() < 1e-9

    def test_symmetrized_storage(self):
        m = SymMatrix(np.array([[1.0, 2.0], [0.0, 3.0]]))
        assert m.a[0, 1] == m.a[1, 0] == 1.0

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            SymMatrix(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestLocalOperators:
    def test_linear_eval(self):
        op = Linear(SymMatrix.of(np.eye(2)), 1.0)
        assert op.value(np.eye(2)) == -2.0 + 1.0

    def test_linear_spectrum_contract(self):
        with pytest.raises(InvalidInputError):
            Linear(SymMatrix.of(0.5 * np.eye(2)), 0.0)  # below 1
        with pytest.raises(InvalidInputError):
            Linear(SymMatrix.diag(1, 5), 0.0, ellipticity=4.0)  # above Lambda

    def test_bellman_eval(self):
        op = Bellman((Linear(SymMatrix.of(np.eye(2)), 0.0),
                      Linear(SymMatrix.of(2 * np.eye(2)), 0.0)), "min")
        assert op.value(np.diag([1.0, 0.0])) == -2.0

    def test_pucci_shift_star_swaps_sign(self):
        op = PucciShift(+1, 3.0, 0.5)
        st = op.star()
        rng = np.random.default_rng(7)
        for _ in range(30):
            A = random_sym(rng, scale=2.0)
            assert st.value(A) == pytest.approx(-op.value(-A.a), abs=1e-12)

    def test_sandwich(self):
        # P-(A-B) <= F(A) - F(B) <= P+(A-B) for every operator family
        rng = np.random.default_rng(8)
        lam = 4.0
        ops = [
            Linear(SymMatrix.diag(1, 4), 0.7, lam),
            Linear(SymMatrix.of([[2.0, 0.6], [0.6, 1.7]]), -0.3, lam),
            Bellman((Linear(SymMatrix.of(np.eye(2)), 0.0, lam),
                     Linear(SymMatrix.of(4 * np.eye(2)), 1.0, lam)), "min"),
            PucciShift(-1, lam, 0.2),
        ]
        for op in ops:
            for _ in range(100):
                A = random_sym(rng, scale=2.0)
                B = random_sym(rng, scale=2.0)
                diff = op.value(A) - op.value(B)
                M = A.a - B.a
                assert pucci("-", M, lam) - 1e-10 <= diff <= pucci("+", M, lam) + 1e-10

    def test_monotone_ellipticity(self):
        # A <= B (in the semidefinite order) implies F(A) >= F(B)
        rng = np.random.default_rng(9)
        ops = [Linear(SymMatrix.diag(1, 3), 0.0, 4.0),
               Bellman((Linear(SymMatrix.of(np.eye(2)), 1.0, 4.0),
                        Linear(SymMatrix.of(2 * np.eye(2)), 0.0, 4.0)), "max"),
               PucciShift(+1, 4.0)]
        for op in ops:
            for _ in range(60):
                A = random_sym(rng)
                D = rng.normal(size=(2, 2))
                B = SymMatrix(A.a + D @ D.T)
                assert op.value(A) >= op.value(B) - 1e-10


class TestFieldTransforms:
    def test_eval_constant_linear(self):
        f = constant_field(Linear(SymMatrix.of(np.eye(2)), 1.0))
        assert f.value(np.eye(2), (0.3, 0.3)) == -1.0

    def test_eval_bellman(self):
        f = constant_field(Bellman((Linear(SymMatrix.of(np.eye(2)), 0.0),
                                    Linear(SymMatrix.of(2 * np.eye(2)), 0.0)),
                                   "min"))
        assert f.value(np.diag([1.0, 0.0]), (0.0, 0.0)) == -2.0

    def test_star_eval(self):
        f = constant_field(Linear(SymMatrix.of(np.eye(2)), 1.0))
        assert f.star().value(np.zeros((2, 2)), (0.0, 0.0)) == -1.0

    def test_star_involution_exact(self):
        f = constant_field(Linear(SymMatrix.diag(1, 2), 0.4)) \
            .translate(SymMatrix.diag(0.3, -0.1)).shift(0.2)
        rng = np.random.default_rng(10)
        for _ in range(100):
            A = random_sym(rng, scale=2.0)
            x = tuple(rng.uniform(-1, 1, size=2))
            assert f.star().star().value(A, x) == f.value(A, x)

    def test_translate_additive(self):
        f = constant_field(Linear(SymMatrix.of(np.eye(2)), 0.0))
        A0 = SymMatrix.diag(0.5, -0.2)
        B0 = SymMatrix.of([[0.1, 0.3], [0.3, 0.0]])
        g1 = f.translate(A0).translate(B0)
        g2 = f.translate(A0 + B0)
        rng = np.random.default_rng(11)
        for _ in range(50):
            A = random_sym(rng)
            assert g1.value(A, (0, 0)) == pytest.approx(g2.value(A, (0, 0)), abs=1e-13)

    def test_translate_zero_identity(self):
        f = constant_field(Linear(SymMatrix.of(np.eye(2)), 0.5))
        g = f.translate(SymMatrix.zero(2))
        rng = np.random.default_rng(12)
        for _ in range(20):
            A = random_sym(rng)
            assert g.value(A, (0, 0)) == f.value(A, (0, 0))

    def test_shift_translate_commute(self):
        f = constant_field(Bellman((Linear(SymMatrix.of(np.eye(2)), 0.0),
                                    Linear(SymMatrix.diag(1, 2), 0.3)), "min"))
        A0 = SymMatrix.diag(0.2, 0.7)
        g1 = f.shift(1.1).translate(A0)
        g2 = f.translate(A0).shift(1.1)
        rng = np.random.default_rng(13)
        for _ in range(50):
            A = random_sym(rng)
            assert g1.value(A, (0, 0)) == pytest.approx(g2.value(A, (0, 0)), abs=1e-13)

    def test_homogeneous_linear_star_invariant(self):
        f = constant_field(Linear(SymMatrix.diag(1, 3), 0.0))
        rng = np.random.default_rng(14)
        for _ in range(50):
            A = random_sym(rng)
            assert f.star().value(A, (0, 0)) == pytest.approx(f.value(A, (0, 0)),
                                                              abs=1e-13)

    def test_effective_tile_matches_eval(self):
        f = constant_field(Bellman((Linear(SymMatrix.of(np.eye(2)), 0.2),
                                    Linear(SymMatrix.of(3 * np.eye(2)), -0.1)),
                                   "min")) \
            .translate(SymMatrix.diag(0.4, -0.3)).shift(0.7).star()
        tile = f.effective_tile((0, 0))
        rng = np.random.default_rng(15)
        for _ in range(60):
            A = random_sym(rng, scale=2.0)
            assert tile.value(A) == pytest.approx(f.value(A, (0.5, 0.5)), abs=1e-12)


class _MisdeclaredOperator(LocalOperator):
    # reports a smaller ellipticity than the coefficients actually have
    def __init__(self):
        self.inner = Linear(SymMatrix.of(3 * np.eye(2)), 0.0)
        self.ellipticity = 2.0

    def value(self, A):
        return self.inner.value(A)

    def f0(self):
        return 0.0


class TestEllipticityReport:
    def test_linear_zero_violation(self):
        f = constant_field(Linear(SymMatrix.diag(1, 4), 0.5, 4.0))
        rep = ellipticity_report(f, 200, seed=1)
        assert rep.max_violation == 0.0

    def test_bellman_zero_violation(self):
        f = constant_field(Bellman((Linear(SymMatrix.of(np.eye(2)), 0.0, 4.0),
                                    Linear(SymMatrix.of(4 * np.eye(2)), 1.0, 4.0)),
                                   "min"))
        rep = ellipticity_report(f, 200, seed=2)
        assert rep.max_violation <= 1e-12

    def test_out_of_contract_detected(self):
        f = constant_field(_MisdeclaredOperator())
        rep = ellipticity_report(f, 100, seed=3)
        assert rep.max_violation > 0.1

    def test_needs_samples(self):
        f = constant_field(Linear(SymMatrix.of(np.eye(2)), 0.0))
        with pytest.raises(InvalidInputError):
            ellipticity_report(f, 0)


def test_out_of_window_error():
    from homoglab.environment import checkerboard, field_of, sample_realization
    r = sample_realization(checkerboard(), ((0, 0), (2, 2)), 1, 0)
    f = field_of(r)
    with pytest.raises(OutOfWindowError):
        f.value(np.eye(2), (5.0, 5.0))
