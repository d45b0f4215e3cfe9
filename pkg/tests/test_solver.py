import numpy as np
import pytest

from homoglab.environment import (bellman_checkerboard, checkerboard,
                                  constant_ensemble, field_of,
                                  sample_realization)
from homoglab.grid import Box, GridFunction
from homoglab.operators import (Bellman, Linear, PucciShift, SymMatrix,
                                constant_field)
from homoglab.solver import (BoundaryData, DirichletSystem,
                             NonConvergenceError, StencilError,
                             apply_operator, solve_cell, solve_dirichlet,
                             stencil_weights)


EYE = SymMatrix.of(np.eye(2))


class TestStencil:
    def test_reconstruction(self):
        rng = np.random.default_rng(1)
        from homoglab.solver import directions
        dirs = directions(2)
        for _ in range(50):
            q = rng.uniform(-0.9, 0.9)
            lo = 1.0 + rng.uniform(0, 2)
            a = np.array([[lo + abs(q), q], [q, lo + abs(q)]])
            w = stencil_weights(a)
            recon = sum(wk * np.outer(v, v) for wk, v in zip(w, dirs))
            assert np.abs(recon - a).max() < 1e-12
            assert np.all(w >= 0)

    def test_not_dominant_rejected(self):
        with pytest.raises(StencilError):
            stencil_weights(np.array([[12.0, 2.5], [2.5, 2.0]]))

    def test_d3(self):
        from homoglab.solver import directions
        dirs = directions(3)
        a = np.array([[3.0, 0.5, -0.4], [0.5, 2.0, 0.3], [-0.4, 0.3, 2.5]])
        w = stencil_weights(a)
        recon = sum(wk * np.outer(v, v) for wk, v in zip(w, dirs))
        assert np.abs(recon - a).max() < 1e-12


class TestQuadraticExactness:
    def test_harmonic_bilinear(self, unit_box):
        f = constant_field(Linear(EYE, 0.0))
        u, rep = solve_dirichlet(f, unit_box, 16, f=0.0,
                                 g=BoundaryData.samples(
                                     _boundary_vals(unit_box, 16,
                                                    lambda x, y: x * y)))
        exact = GridFunction.from_callable(unit_box, 16, lambda x, y: x * y)
        assert np.abs(u.values - exact.values).max() < 1e-11
        assert rep.residual <= 1e-10

    def test_poisson_paraboloid(self, unit_box):
        f = constant_field(Linear(EYE, 0.0))
        u, _ = solve_dirichlet(f, unit_box, 19, f=-2.0,
                               g=BoundaryData.quadratic(np.eye(2)))
        exact = GridFunction.from_callable(unit_box, 19,
                                           lambda x, y: 0.5 * (x * x + y * y))
        assert np.abs(u.values - exact.values).max() < 1e-11

    def test_bellman_harmonic_polynomial(self, unit_box):
        field = constant_field(Bellman((Linear(EYE, 0.0),
                                        Linear(SymMatrix.of(2 * np.eye(2)), 0.0)),
                                       "min"))
        u, _ = solve_dirichlet(field, unit_box, 16,
                               g=BoundaryData.quadratic(np.diag([2.0, -2.0])))
        exact = GridFunction.from_callable(unit_box, 16, lambda x, y: x * x - y * y)
        assert np.abs(u.values - exact.values).max() < 1e-10

    def test_random_quadratics(self, unit_box):
        # constant-coefficient linear problems with quadratic data are exact
        rng = np.random.default_rng(2)
        for _ in range(5):
            q = rng.uniform(-0.5, 0.5)
            a = np.array([[1.5 + abs(q), q], [q, 1.2 + abs(q)]])
            A = 0.5 * (lambda m: m + m.T)(rng.normal(size=(2, 2)))
            c = rng.normal()
            op = Linear(SymMatrix(a), c, 4.0)
            rhs = op.value(A)
            field = constant_field(op)
            u, _ = solve_dirichlet(field, unit_box, 13, f=rhs,
                                   g=BoundaryData.quadratic(A))
            exact = GridFunction.from_callable(
                unit_box, 13, lambda x, y: 0.5 * (A[0, 0] * x * x
                                                  + 2 * A[0, 1] * x * y
                                                  + A[1, 1] * y * y))
            assert np.abs(u.values - exact.values).max() < 1e-10


def _boundary_vals(box, n, fn):
    u = GridFunction.from_callable(box, n, fn)
    return u.values[u.boundary_mask()]


class TestComparisonPrinciple:
    def test_random_instances(self, unit_box):
        ens = checkerboard(c=1.0)
        rng = np.random.default_rng(3)
        for i in range(3):
            r = sample_realization(ens, ((-1, -1), (2, 2)), seed=40, index=i)
            field = field_of(r)
            sysm = DirichletSystem(field, unit_box, 13)
            nb = 4 * (13 - 1)
            g2 = rng.normal(size=nb)
            g1 = g2 - rng.uniform(0, 1, size=nb)
            f2 = rng.normal()
            f1 = f2 + rng.uniform(0, 1)
            u1, _ = sysm.solve(f1, BoundaryData.samples(g1))
            u2, _ = sysm.solve(f2, BoundaryData.samples(g2))
            assert np.all(u1.values <= u2.values + 1e-9)

    def test_bellman_comparison(self, unit_box):
        field = constant_field(Bellman((Linear(EYE, 0.0),
                                        Linear(SymMatrix.of(3 * np.eye(2)), 0.0)),
                                       "min"))
        rng = np.random.default_rng(4)
        sysm = DirichletSystem(field, unit_box, 13)
        nb = 4 * (13 - 1)
        g2 = rng.normal(size=nb)
        g1 = g2 - rng.uniform(0, 0.5, size=nb)
        u1, _ = sysm.solve(0.0, BoundaryData.samples(g1))
        u2, _ = sysm.solve(0.0, BoundaryData.samples(g2))
        assert np.all(u1.values <= u2.values + 1e-9)

    def test_maximum_principle(self, unit_box):
        # F(0, .) = 0 fields keep solutions inside the boundary range
        ens = checkerboard()
        r = sample_realization(ens, ((-1, -1), (2, 2)), seed=41, index=0)
        rng = np.random.default_rng(5)
        g = rng.normal(size=4 * (18 - 1))
        u, _ = solve_dirichlet(field_of(r), unit_box, 18,
                               g=BoundaryData.samples(g))
        assert u.values.min() >= g.min() - 1e-9
        assert u.values.max() <= g.max() + 1e-9


class TestPolicyIteration:
    def test_residual_monotone(self, unit_box):
        field = constant_field(Bellman(
            (Linear(EYE, 0.0), Linear(SymMatrix.of(4 * np.eye(2)), 0.0)), "min"))
        rng = np.random.default_rng(6)
        g = rng.normal(size=4 * (21 - 1)) * 2.0
        _, rep = solve_dirichlet(field, unit_box, 21, g=BoundaryData.samples(g))
        hist = rep.residual_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert rep.residual <= 1e-10

    def test_nonconvergence_reported(self, unit_box):
        # starting policy needs a switch; one iteration cannot finish
        field = constant_field(Bellman(
            (Linear(EYE, 0.0), Linear(SymMatrix.of(2 * np.eye(2)), 0.0)), "min"))
        with pytest.raises(NonConvergenceError) as err:
            solve_dirichlet(field, unit_box, 13, f=-2.0,
                            g=BoundaryData.quadratic(np.eye(2)),
                            max_policy_iters=1)
        assert err.value.report is not None
        assert err.value.report.iterations == 1


class TestApplyOperator:
    def test_quadratic_gives_constant(self, unit_box):
        a = SymMatrix.diag(1, 2)
        op = Linear(a, 0.7)
        A = np.array([[0.5, 0.2], [0.2, -0.3]])
        u = GridFunction.from_callable(
            unit_box, 13, lambda x, y: 0.5 * (A[0, 0] * x * x + 2 * A[0, 1] * x * y
                                              + A[1, 1] * y * y))
        vals = apply_operator(constant_field(op), u)
        assert np.abs(vals - op.value(A)).max() < 1e-10

    def test_affine_gives_f0(self, unit_box):
        ens = checkerboard(c=1.0)
        r = sample_realization(ens, ((-1, -1), (2, 2)), seed=42, index=0)
        field = field_of(r)
        u = GridFunction.from_callable(unit_box, 13, lambda x, y: 0.3 * x - y)
        vals = apply_operator(field, u)
        pts = u.node_points().reshape(13, 13, 2)[1:-1, 1:-1]
        expect = np.array([[field.value(np.zeros((2, 2)), tuple(p)) for p in row]
                           for row in pts])
        assert np.abs(vals - expect).max() < 1e-12

    def test_solution_residual(self, unit_box):
        ens = checkerboard(c=1.0)
        r = sample_realization(ens, ((-1, -1), (2, 2)), seed=43, index=0)
        field = field_of(r)
        u, rep = solve_dirichlet(field, unit_box, 19,
                                 g=BoundaryData.quadratic(0.2 * np.eye(2)))
        vals = apply_operator(field, u)
        assert np.abs(vals).max() <= max(rep.residual, 1e-10) + 1e-12


class TestStencilErrors:
    def test_pucci_tile_rejected(self, unit_box):
        field = constant_field(PucciShift(+1, 3.0))
        with pytest.raises(StencilError, match="cell"):
            solve_dirichlet(field, unit_box, 7)

    def test_bad_linear_named_cell(self, unit_box):
        bad = Linear(SymMatrix.of([[12.0, 2.5], [2.5, 2.0]]), 0.0, 13.0)
        field = constant_field(bad)
        with pytest.raises(StencilError, match=r"cell \("):
            solve_dirichlet(field, unit_box, 7)


class TestCellProblem:
    def test_x_independent_exact(self):
        op = Linear(SymMatrix.diag(1, 2), 0.4)
        ens = constant_ensemble(op)
        r = sample_realization(ens, ((0, 0), (3, 3)), 0, 0)
        A = SymMatrix.diag(0.5, -0.25)
        for delta in (0.5, 0.1):
            _, val, _ = solve_cell(r, A, delta, 3)
            assert val == pytest.approx(-op.value(A), abs=1e-9)

    def test_forcing_constant(self):
        ens = constant_ensemble(Linear(EYE, 1.0))
        r = sample_realization(ens, ((0, 0), (3, 3)), 0, 0)
        _, val, _ = solve_cell(r, np.zeros((2, 2)), 0.3, 3)
        assert val == pytest.approx(-1.0, abs=1e-10)

    def test_value_bounded_by_sup(self):
        ens = checkerboard(c=1.0)
        r = sample_realization(ens, ((0, 0), (3, 3)), 7, 0)
        A = SymMatrix.of(np.eye(2))
        _, val, _ = solve_cell(r, A, 0.25, 3)
        bound = max(abs(field_of(r).value(A, (x + 0.5, y + 0.5)))
                    for x in range(3) for y in range(3))
        assert abs(val) <= bound + 1e-9

    def test_bellman_cell(self):
        ens = bellman_checkerboard()
        r = sample_realization(ens, ((0, 0), (2, 2)), 0, 0)
        A = SymMatrix.of(np.eye(2))
        _, val, _ = solve_cell(r, A, 0.2, 2)
        tile = ens.tiles[0]
        assert val == pytest.approx(-tile.value(A), abs=1e-9)


def test_boundary_set_exactly(unit_box):
    ens = checkerboard(c=1.0)
    r = sample_realization(ens, ((-1, -1), (2, 2)), seed=44, index=0)
    g = BoundaryData.quadratic(np.eye(2), p=(0.1, -0.2), c=0.3)
    u, _ = solve_dirichlet(field_of(r), unit_box, 13, g=g)
    mask = u.boundary_mask()
    pts = u.node_points()[mask.ravel()]
    assert np.array_equal(u.values[mask], g.values_at(pts))
