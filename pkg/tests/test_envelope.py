import numpy as np
import pytest

from homoglab.envelope import (SlopeBoxError, convex_envelope,
                               mc_subdiff_measure, subdiff_at,
                               subdiff_measure, support_certificate)
from homoglab.grid import Box, GridFunction
from homoglab.operators import Linear, SymMatrix, constant_field
from homoglab.reference import double_well, paraboloid, ridge_profile, \
    unit_det_quadratic
from homoglab.solver import BoundaryData, solve_dirichlet


def lower_hull_1d(xs, ys):
    """Independent oracle: 1-d lower convex hull by monotone chain."""
    pts = list(zip(xs, ys))
    hull = []
    for x, y in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (y2 - y1) * (x - x1) >= (y - y1) * (x2 - x1):
                hull.pop()
            else:
                break
        hull.append((x, y))
    hx = np.array([p[0] for p in hull])
    hy = np.array([p[1] for p in hull])
    return np.interp(xs, hx, hy)


class TestConvexEnvelope:
    def test_convex_function_untouched(self, unit_box):
        u = GridFunction.from_callable(unit_box, 33, paraboloid())
        env = convex_envelope(u)
        assert np.abs(env.envelope_values().values - u.values).max() < 1e-10

    def test_double_well_matches_1d_oracle(self, unit_box):
        u = GridFunction.from_callable(unit_box, 33, double_well())
        env = convex_envelope(u)
        vals = env.envelope_values().values
        xs = u.axis_coords(0)
        expected_line = lower_hull_1d(xs, (xs ** 2 - 0.25) ** 2)
        for j in range(u.n):
            assert np.abs(vals[:, j] - expected_line).max() < 1e-9
        # the envelope floors the well at zero between the minima
        inside = np.abs(xs) <= 0.5
        assert np.abs(vals[inside, :]).max() < 1e-9

    def test_idempotence(self, unit_box):
        rng = np.random.default_rng(8)
        u = GridFunction.from_callable(
            unit_box, 21,
            lambda x, y: np.sin(3 * x) * np.cos(2 * y) + 0.5 * (x * x + y * y))
        gamma = convex_envelope(u).envelope_values()
        gamma2 = convex_envelope(gamma).envelope_values()
        assert np.abs(gamma2.values - gamma.values).max() < 1e-9

    def test_envelope_below_function(self, unit_box):
        u = GridFunction.from_callable(unit_box, 25,
                                       lambda x, y: np.cos(5 * x) * np.sin(4 * y))
        env = convex_envelope(u)
        assert np.all(env.envelope_values().values <= u.values + 1e-10)

    def test_midpoint_convexity_on_lines(self, unit_box):
        u = GridFunction.from_callable(unit_box, 25,
                                       lambda x, y: np.sin(4 * x + y))
        g = convex_envelope(u).envelope_values().values
        for arr in (g, g.T):
            second = arr[:, :-2] + arr[:, 2:] - 2 * arr[:, 1:-1]
            assert second.min() >= -1e-9


class TestSubdiffMeasure:
    def test_paraboloid_near_one(self, unit_box):
        u = GridFunction.from_callable(unit_box, 82, paraboloid())
        val = subdiff_measure(u)
        assert abs(val - 1.0) <= 0.05
        assert val == pytest.approx(((82 - 2) / (82 - 1)) ** 2, abs=1e-9)

    def test_unit_det_family(self, unit_box):
        for r in (1.0, 0.5, 0.25):
            u = GridFunction.from_callable(unit_box, 82, unit_det_quadratic(r))
            assert abs(subdiff_measure(u) - 1.0) <= 0.05

    def test_affine_exactly_zero(self, unit_box):
        u = GridFunction.from_callable(unit_box, 17,
                                       lambda x, y: 1.2 * x - 0.7 * y + 3.0)
        assert subdiff_measure(u) == 0.0

    def test_region_restriction(self, unit_box):
        u = GridFunction.from_callable(unit_box, 46, paraboloid())
        half = Box((-0.25, -0.25), 0.5)
        val = subdiff_measure(u, half)
        # gradient image of the open half-cube has volume 0.25
        assert abs(val - 0.25) <= 0.02

    def test_kink_carries_line_measure_zero(self, unit_box):
        u = GridFunction.from_callable(unit_box, 21, lambda x, y: np.abs(x))
        # one-dimensional gradient image: zero area
        assert subdiff_measure(u) <= 1e-12


class TestSubdiffAt:
    def test_affine_singleton(self, unit_box):
        u = GridFunction.from_callable(unit_box, 9,
                                       lambda x, y: 0.4 * x - 0.3 * y)
        sd = subdiff_at(u, (0.0, 0.0))
        assert sd.points.shape == (1, 2)
        assert np.allclose(sd.points[0], (0.4, -0.3), atol=1e-10)
        assert sd.support_violation <= 1e-12

    def test_kink_segment(self, unit_box):
        n = 21
        u = GridFunction.from_callable(unit_box, n, lambda x, y: np.abs(x))
        # valley endpoints are hull vertices carrying the full slope segment
        sd = subdiff_at(u, (0.0, -0.5))
        xs = sd.points[:, 0]
        assert xs.min() == pytest.approx(-1.0, abs=1e-9)
        assert xs.max() == pytest.approx(1.0, abs=1e-9)
        # and every slope in the segment is supported at the interior node
        for t in (-1.0, -0.3, 0.0, 0.8, 1.0):
            assert support_certificate(u, (0.0, 0.0), (t, 0.0)) <= 1e-9

    def test_paraboloid_atom(self, unit_box):
        u = GridFunction.from_callable(unit_box, 21, paraboloid())
        env = convex_envelope(u)
        sd = subdiff_at(env, (0.0, 0.0))
        h = u.h
        assert sd.volume == pytest.approx(h * h, rel=1e-6)
        assert sd.support_violation <= 1e-12

    def test_non_vertex_empty(self, unit_box):
        # nodes on a facet interior carry no atom
        u = GridFunction.from_callable(unit_box, 17, double_well())
        env = convex_envelope(u)
        sd = subdiff_at(env, (0.0, 0.0))
        assert sd.volume == 0.0


class TestRidgeExample:
    def setup_method(self):
        self.R = 2.0
        self.u_fn, self.w_fn, self.dom = ridge_profile(self.R)
        self.h = 1.0 / 16.0
        n = int(round(4 * self.R / self.h)) + 1
        self.box = Box((-2 * self.R, -2 * self.R), 4 * self.R)
        self.gf = GridFunction.from_callable(self.box, n, self.u_fn)
        X = self.gf.node_points()
        self.mask = self.dom(X[:, 0], X[:, 1]).reshape(self.gf.values.shape)
        ss = np.linspace(0.0, np.sqrt(2.0), 2 * n)
        t = ss / np.sqrt(2.0)
        bp, bv = [], []
        for sgn in (1.0, -1.0):
            bp.append(np.column_stack([t, sgn * (2.0 + ss)]))
            bv.append(np.zeros_like(t))
            bp.append(np.column_stack([2.0 - t, sgn * (2.0 + ss)]))
            bv.append(2.0 - 2.0 * t)
        self.extra = (np.vstack(bp), np.concatenate(bv))
        self.env = convex_envelope(self.gf, mask=self.mask,
                                   extra_points=self.extra)
        self.w = self.w_fn(X[:, 0], X[:, 1]).reshape(self.gf.values.shape)

    def test_envelope_matches_reference(self):
        err = np.abs(self.env.envelope_values().values - self.w)[self.mask]
        assert err.max() <= self.h ** 2

    def test_subgradient_certificates(self):
        assert support_certificate(self.env, (0.0, 0.0), (0.0, 0.0)) <= 1e-12
        assert support_certificate(self.env, (1.0, 0.0), (2.0, 0.0)) <= 1e-12

    def test_localization_sharpness_witness(self):
        # the origin is a contact point with slope 0; the slope 2 e1 is
        # supported barely outside the unit ball around it, so the factor in
        # front of r in the localization bound cannot drop below 2
        assert support_certificate(self.env, (0.0, 0.0), (0.0, 0.0)) <= 1e-12
        assert support_certificate(self.env, (1.0, 0.0), (2.0, 0.0)) <= 1e-12
        r = 1.0 + self.h
        spread = 2.0  # |2 e1 - 0|, attained inside B_r(0)
        assert spread > 1.5 * r  # a bound of the form r + o(r) would fail


def test_localization_containment(unit_box):
    # gradients near a contact vertex stay within 2r + C r^3 of its slope,
    # for solutions dominated by the extremal operator bound
    field = constant_field(Linear(SymMatrix.of(np.eye(2)), 0.0))
    rng = np.random.default_rng(12)
    nb = 4 * (41 - 1)
    g = BoundaryData.samples(0.05 * rng.normal(size=nb) + 0.3)
    u, _ = solve_dirichlet(field, unit_box, 41, f=-0.9, g=g)
    env = convex_envelope(u)
    pos = env.points[env.vertex_rows]
    contact = env.contact_mask().ravel()[env.node_ids[env.vertex_rows]]
    centers = np.flatnonzero(contact & (np.linalg.norm(pos, axis=1) < 0.05))
    assert len(centers) > 0
    for ci in centers[:5]:
        p0 = env.atom_gradients[ci].mean(axis=0)
        for r_ball in (0.05, 0.1):
            sel = np.linalg.norm(pos - pos[ci], axis=1) < r_ball
            slopes = np.vstack([env.atom_gradients[i]
                                for i in np.flatnonzero(sel)])
            spread = np.linalg.norm(slopes - p0, axis=1).max()
            assert spread <= 2 * r_ball + 40.0 * r_ball ** 3 + 2 * u.h


class TestPerturbationAndContact:
    def _supersolutions(self, unit_box):
        # exact solves under operators dominated by the extremal bound -1
        out = []
        field = constant_field(Linear(SymMatrix.of(np.eye(2)), 0.0))
        rng = np.random.default_rng(9)
        nb = 4 * (33 - 1)
        for k in range(3):
            g = BoundaryData.samples(0.15 * rng.normal(size=nb)
                                     + 0.4 * rng.uniform())
            u, _ = solve_dirichlet(field, unit_box, 33, f=0.9, g=g)
            out.append(u)
        u, _ = solve_dirichlet(field, unit_box, 33, f=1.0,
                               g=BoundaryData.quadratic(-0.5 * np.eye(2)))
        out.append(u)
        return out

    def test_parabolic_perturbation_monotone(self, unit_box):
        for u in self._supersolutions(unit_box):
            base = subdiff_measure(u)
            pts = u.node_points()
            sq = 0.5 * (pts[:, 0] ** 2 + pts[:, 1] ** 2).reshape(u.values.shape)
            prev = base
            for s in (0.2, 0.5, 0.9):
                us = u.with_values(u.values - s * sq)
                val = subdiff_measure(us)
                assert val <= prev + 1e-9
                prev = val

    def test_contact_set_bound(self, unit_box):
        # measure <= 2^d * (contact volume estimate) * 1.1
        for u in self._supersolutions(unit_box):
            env = convex_envelope(u)
            contact_nodes = int(env.contact_mask().sum())
            contact_volume = contact_nodes * u.h ** 2
            assert env.measure() <= 4.0 * contact_volume * 1.1 + 1e-12


class TestMonteCarloOracle:
    def test_agreement_smooth(self, unit_box):
        rng = np.random.default_rng(11)
        for k in range(2):
            c = rng.normal(size=4)
            u = GridFunction.from_callable(
                unit_box, 17,
                lambda x, y: 0.8 * (x * x + y * y) + c[0] * np.sin(2 * x)
                + c[1] * x * y + 0.2 * np.cos(3 * y) * c[2] + c[3] * x)
            hull = subdiff_measure(u)
            mc = mc_subdiff_measure(u, n_slopes=3000, seed=100 + k)
            assert abs(hull - mc.value) <= 3 * mc.stderr + 1e-9

    def test_affine_zero(self, unit_box):
        # the slope box degenerates to a point, so the estimate is fp dust
        u = GridFunction.from_callable(unit_box, 9, lambda x, y: x - y)
        mc = mc_subdiff_measure(u, n_slopes=500, seed=0)
        assert mc.value <= 1e-15

    def test_paraboloid_near_one(self, unit_box):
        u = GridFunction.from_callable(unit_box, 33, paraboloid())
        mc = mc_subdiff_measure(u, n_slopes=4000, seed=1)
        assert abs(mc.value - 1.0) <= 0.08

    def test_small_slope_box_detected(self, unit_box):
        u = GridFunction.from_callable(unit_box, 17, paraboloid())
        with pytest.raises(SlopeBoxError):
            mc_subdiff_measure(u, n_slopes=100,
                               slope_box=((-0.1, -0.1), (0.1, 0.1)))


class TestSubadditivityMechanism:
    def test_restricted_children_dominate(self, unit_box):
        # exact solve on the parent; children of the restriction measured by
        # their own envelopes add up to at least the parent measure
        from homoglab.grid import TriadicCube, restrict, subcubes
        from homoglab.environment import checkerboard, field_of, sample_realization

        parent = TriadicCube(0, (0, 0))
        n = 163  # seam loss stays inside the 3% budget at this resolution
        ens = checkerboard(c=1.0)
        r = sample_realization(ens, ((-1, -1), (2, 2)), seed=50, index=0)
        u, _ = solve_dirichlet(field_of(r), parent.box(), n,
                               g=BoundaryData.quadratic(0.2 * np.eye(2)))
        parent_measure = subdiff_measure(u, parent.box())
        child_total = sum(
            subdiff_measure(restrict(u, c), c.box()) for c in subcubes(parent))
        assert parent_measure <= child_total * 1.03 + 1e-12
