"""Fast built-in invariant suite, runnable from the command line.

Covers the envelope oracles, the ridge example, the extremal-operator
algebra and the quadratic-exactness solves in well under a minute.  Used to
smoke-test an installation without the full pytest suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dfield

import numpy as np

from .envelope import convex_envelope, mc_subdiff_measure, subdiff_measure, \
    support_certificate
from .environment import checkerboard, sample_realization
from .grid import Box, GridFunction, TriadicCube, cube_of, subcubes
from .mu import mu_constant_coeff, mu_star_estimate, MuEstimateConfig
from .operators import Bellman, Linear, SymMatrix, constant_field, pucci
from .reference import paraboloid, ridge_profile, unit_det_quadratic
from .solver import BoundaryData, solve_cell, solve_dirichlet


@dataclass
class SelftestReport:
    passed: int = 0
    failed: int = 0
    failures: list = dfield(default_factory=list)
    per_module: dict = dfield(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failed == 0


def _checks():
    eye = SymMatrix.of(np.eye(2))
    box = Box((-0.5, -0.5), 1.0)

    def pucci_values():
        assert pucci("+", np.eye(2), 2.0) == -2.0
        assert pucci("+", np.diag([1.0, -1.0]), 2.0) == 1.0
        assert pucci("-", np.eye(2), 2.0) == -4.0
        assert pucci("+", np.zeros((2, 2)), 7.0) == 0.0

    def pucci_duality():
        rng = np.random.default_rng(0)
        for _ in range(50):
            M = rng.normal(size=(2, 2))
            A = 0.5 * (M + M.T)
            assert abs(pucci("-", A, 3.0) + pucci("+", -A, 3.0)) < 1e-12

    def star_involution():
        f = constant_field(Linear(eye, 1.0))
        rng = np.random.default_rng(1)
        for _ in range(20):
            M = rng.normal(size=(2, 2))
            A = SymMatrix(0.5 * (M + M.T))
            x = (0.5, 0.5)
            assert f.star().star().value(A, x) == f.value(A, x)

    def triadic_cubes():
        assert cube_of(0, (0.4, 0.4)).k == (0, 0)
        assert cube_of(0, (0.6, 0.0)).k == (1, 0)
        assert len(subcubes(TriadicCube(1, (0, 0)))) == 9

    def environment_determinism():
        ens = checkerboard()
        a = sample_realization(ens, ((-2, -2), (4, 4)), 5, 3)
        b = sample_realization(ens, ((-2, -2), (4, 4)), 5, 3)
        assert np.array_equal(a.cells, b.cells)

    def quadratic_exactness():
        f = constant_field(Linear(eye, 0.0))
        u, _ = solve_dirichlet(f, box, 19, f=-2.0,
                               g=BoundaryData.quadratic(np.eye(2)))
        exact = GridFunction.from_callable(box, 19, paraboloid())
        assert np.abs(u.values - exact.values).max() < 1e-10

    def bellman_harmonic():
        f = constant_field(Bellman((Linear(eye, 0.0),
                                    Linear(SymMatrix.of(2 * np.eye(2)), 0.0)),
                                   "min"))
        u, _ = solve_dirichlet(f, box, 19, g=BoundaryData.quadratic(np.diag([2.0, -2.0])))
        exact = GridFunction.from_callable(box, 19, lambda x, y: x * x - y * y)
        assert np.abs(u.values - exact.values).max() < 1e-9

    def cell_constant():
        ens_tile = Linear(eye, 1.0)
        from .environment import constant_ensemble
        r = sample_realization(constant_ensemble(ens_tile), ((0, 0), (3, 3)), 0, 0)
        _, val, _ = solve_cell(r, np.zeros((2, 2)), 0.25, 3)
        assert abs(val - (-1.0)) < 1e-9

    def envelope_measure():
        u = GridFunction.from_callable(box, 46, paraboloid())
        val = subdiff_measure(u)
        assert abs(val - (44.0 / 45.0) ** 2) < 1e-9
        w = GridFunction.from_callable(box, 46, unit_det_quadratic(0.5))
        assert abs(subdiff_measure(w) - (44.0 / 45.0) ** 2) < 1e-9

    def envelope_affine_zero():
        u = GridFunction.from_callable(box, 17, lambda x, y: 0.3 * x - 0.2 * y + 1.0)
        assert subdiff_measure(u) == 0.0

    def mc_oracle():
        u = GridFunction.from_callable(box, 17, paraboloid())
        mc = mc_subdiff_measure(u, n_slopes=1500, seed=4)
        assert abs(mc.value - subdiff_measure(u)) <= 3.0 * mc.stderr + 1e-12

    def ridge_example():
        R = 2.0
        u_fn, w_fn, dom = ridge_profile(R)
        h = 1.0 / 16.0
        n = int(round(4 * R / h)) + 1
        big = Box((-2 * R, -2 * R), 4 * R)
        gf = GridFunction.from_callable(big, n, u_fn)
        X = gf.node_points()
        mask = dom(X[:, 0], X[:, 1]).reshape(gf.values.shape)
        ss = np.linspace(0.0, np.sqrt(2.0), 2 * n)
        t = ss / np.sqrt(2.0)
        bp, bv = [], []
        for sgn in (1.0, -1.0):
            bp.append(np.column_stack([t, sgn * (2.0 + ss)]))
            bv.append(np.zeros_like(t))
            bp.append(np.column_stack([2.0 - t, sgn * (2.0 + ss)]))
            bv.append(2.0 - 2.0 * t)
        env = convex_envelope(gf, mask=mask,
                              extra_points=(np.vstack(bp), np.concatenate(bv)))
        w = w_fn(X[:, 0], X[:, 1]).reshape(gf.values.shape)
        err = np.abs(env.envelope_values().values - w)[mask]
        assert err.max() <= h * h, f"ridge envelope error {err.max():.2e}"
        assert support_certificate(env, (0.0, 0.0), (0.0, 0.0)) <= 1e-12
        assert support_certificate(env, (1.0, 0.0), (2.0, 0.0)) <= 1e-12

    def const_coeff_closed_form():
        cc = mu_constant_coeff(Linear(eye, 2.0))
        assert abs(cc.value - 1.0) < 1e-6
        cc2 = mu_constant_coeff(Linear(SymMatrix.diag(1, 4), 2.0))
        assert abs(cc2.value - 0.25) < 1e-6

    def star_estimate_zero():
        f = constant_field(Linear(eye, 2.0))
        est = mu_star_estimate(f, TriadicCube(0, (0, 0)), MuEstimateConfig(n=19))
        assert est.value == 0.0

    return [
        ("operators", "pucci_values", pucci_values),
        ("operators", "pucci_duality", pucci_duality),
        ("operators", "star_involution", star_involution),
        ("grid", "triadic_cubes", triadic_cubes),
        ("environment", "determinism", environment_determinism),
        ("solver", "quadratic_exactness", quadratic_exactness),
        ("solver", "bellman_harmonic", bellman_harmonic),
        ("solver", "cell_constant", cell_constant),
        ("envelope", "measure_paraboloid", envelope_measure),
        ("envelope", "affine_zero", envelope_affine_zero),
        ("envelope", "mc_oracle", mc_oracle),
        ("envelope", "ridge_example", ridge_example),
        ("mu", "const_coeff_closed_form", const_coeff_closed_form),
        ("mu", "star_estimate_zero", star_estimate_zero),
    ]


def selftest(force_fail: str | None = None, quiet: bool = False) -> SelftestReport:
    """Run the fast invariant suite; returns a report with per-module counts.

    force_fail injects a deliberate failure into the named check (used to
    verify that failures are caught and reported).
    """
    rep = SelftestReport()
    t0 = time.perf_counter()
    for module, name, fn in _checks():
        start = time.perf_counter()
        try:
            if force_fail == name:
                raise AssertionError("injected failure")
            fn()
            ok = True
        except Exception as exc:
            ok = False
            rep.failures.append(f"{module}.{name}: {exc}")
        dt = time.perf_counter() - start
        mod = rep.per_module.setdefault(module, {"passed": 0, "failed": 0})
        if ok:
            rep.passed += 1
            mod["passed"] += 1
        else:
            rep.failed += 1
            mod["failed"] += 1
        if not quiet:
            print(f"[{'PASS' if ok else 'FAIL'}] {module}.{name} ({dt:.2f}s)")
    rep.wall_seconds = time.perf_counter() - t0
    if not quiet:
        print(f"{rep.passed} passed, {rep.failed} failed "
              f"in {rep.wall_seconds:.1f}s")
        for module, counts in sorted(rep.per_module.items()):
            print(f"  {module}: {counts['passed']} passed, {counts['failed']} failed")
        for f in rep.failures:
            print("  failure:", f)
    return rep
