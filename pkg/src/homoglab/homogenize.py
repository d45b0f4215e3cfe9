"""Monte Carlo statistics of the curvature quantity across triadic scales.

Drives the two routes to the effective operator: the balancing constant
(bisection on the gap between the supersolution and subsolution curves,
estimated with common random numbers) and the damped cell problem on a
torus with extrapolation to zero damping.  Also the variance-decay and
homogenization-error experiments.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dfield

import numpy as np

from .environment import TileEnsemble, field_of, sample_realization, window_for
from .grid import Box, GridFunction, TriadicCube
from .mu import MuEstimate, MuEstimateConfig, mu_estimate, mu_star_estimate
from .operators import Linear, LocalOperator, SymMatrix, constant_field
from .solver import BoundaryData, DirichletSystem, TorusSystem


class ExperimentError(RuntimeError):
    """Raised when too many realizations fail or a bracket cannot be found."""


class BracketingError(ExperimentError):
    def __init__(self, msg, curve=None):
        super().__init__(msg)
        self.curve = curve


def _pmap(fn, tasks, workers: int = 1):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


def _experiment_config(ensemble: TileEnsemble, n: int,
                       optimize: bool = False, budget: int = 0) -> MuEstimateConfig:
    # symmetric candidate rule: the averaged-coefficient quadratic depends on
    # tile frequencies asymmetrically between a field and its star, which
    # would bias the balance crossing; experiments use the tile-wise family
    return MuEstimateConfig(n=n, optimize=optimize, budget=budget,
                            include_average=False)


# ---------------------------------------------------------------------------
# moment curves
# ---------------------------------------------------------------------------

@dataclass
class MomentRow:
    m: int
    s: float
    n_ok: int
    n_fail: int
    mean_mu: float
    mean_mustar: float
    m2_mu: float
    m2_mustar: float
    var_mu: float
    var_mustar: float
    se_mu: float
    se_mustar: float
    se_m2_mu: float
    se_m2_mustar: float


@dataclass
class MomentCurve:
    rows: list
    master_seed: int
    A: SymMatrix
    errors: list = dfield(default_factory=list)

    def row(self, m: int, s: float) -> MomentRow:
        for r in self.rows:
            if r.m == m and abs(r.s - s) < 1e-12:
                return r
        raise KeyError(f"no row for m={m}, s={s}")


def _mu_pair_task(args):
    ensemble, A_bytes, d, m, s, i, seed, cfg = args
    try:
        cube = TriadicCube(m, (0,) * d)
        lo, shape = window_for(cube.box())
        r = sample_realization(ensemble, (lo, shape), seed, i)
        f = field_of(r)
        A = SymMatrix(np.frombuffer(A_bytes).reshape(d, d))
        if not np.allclose(A.a, 0.0):
            f = f.translate(A)
        if s != 0.0:
            f = f.shift(s)
        a = mu_estimate(f, cube, cfg).value
        b = mu_star_estimate(f, cube, cfg).value
        return (i, s, a, b, None)
    except Exception as exc:  # realization-level failures are tolerated below
        return (i, s, np.nan, np.nan, f"{type(exc).__name__}: {exc}")


def _aggregate(m, s, results, min_ok_fraction=0.9):
    ok = [(a, b) for (_, _, a, b, err) in results if err is None]
    errors = [(i, err) for (i, _, _, _, err) in results if err is not None]
    n = len(results)
    if len(ok) < min_ok_fraction * n:
        raise ExperimentError(
            f"m={m}, s={s}: only {len(ok)}/{n} realizations succeeded; "
            f"first error: {errors[0][1] if errors else '?'}")
    mu = np.array([a for a, _ in ok])
    ms = np.array([b for _, b in ok])
    N = len(mu)

    def se(x):
        return float(x.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0

    row = MomentRow(
        m=m, s=s, n_ok=N, n_fail=n - N,
        mean_mu=float(mu.mean()), mean_mustar=float(ms.mean()),
        m2_mu=float((mu ** 2).mean()), m2_mustar=float((ms ** 2).mean()),
        var_mu=float(mu.var(ddof=1)) if N > 1 else 0.0,
        var_mustar=float(ms.var(ddof=1)) if N > 1 else 0.0,
        se_mu=se(mu), se_mustar=se(ms),
        se_m2_mu=se(mu ** 2), se_m2_mustar=se(ms ** 2))
    return row, errors


def expected_mu_curve(ensemble: TileEnsemble, A, m: int, s_list, N: int,
                      seed: int, config: MuEstimateConfig | None = None,
                      workers: int = 1) -> MomentCurve:
    """Sample moment statistics of the estimates at each shift in s_list.

    For shift s the pair recorded is (estimate of the translated field plus
    s, estimate of its star); the star of the shifted field equals the
    starred translated field shifted by -s, so one field serves both columns.
    Realizations are shared across shifts (common random numbers).
    """
    if N < 2:
        raise ValueError("need at least two realizations")
    A = SymMatrix.of(A)
    cfg = config or _experiment_config(ensemble, n=28)
    tasks = [(ensemble, A.a.tobytes(), ensemble.d, m, float(s), i, seed, cfg)
             for s in s_list for i in range(N)]
    results = _pmap(_mu_pair_task, tasks, workers)
    rows, errors = [], []
    for k, s in enumerate(s_list):
        chunk = results[k * N:(k + 1) * N]
        row, errs = _aggregate(m, float(s), chunk)
        rows.append(row)
        errors.extend(errs)
    return MomentCurve(rows, seed, A, errors)


# ---------------------------------------------------------------------------
# balancing constant and the effective operator
# ---------------------------------------------------------------------------

@dataclass
class EffectiveEstimate:
    A: SymMatrix
    s_hat: float | None = None
    s_hat_se: float = float("nan")
    cell_hat: float | None = None
    cell_se: float = float("nan")
    diagnostics: dict = dfield(default_factory=dict)

    def joint_ci95(self) -> float:
        return 1.96 * math.hypot(
            0.0 if math.isnan(self.s_hat_se) else self.s_hat_se,
            0.0 if math.isnan(self.cell_se) else self.cell_se)


def balance_constant(ensemble: TileEnsemble, A, m: int, N: int,
                     tol: float = 0.05, seed: int = 0,
                     config: MuEstimateConfig | None = None,
                     workers: int = 1) -> EffectiveEstimate:
    """Bisection for the shift balancing the two curvature curves.

    The gap  g(s) = E[mu(Q_m, F_A - s)] - E[mu(Q_m, (F_A)_* + s)]  is
    estimated with shared realizations at every s, and is nonincreasing in s;
    bisection stops when |g| <= tol or the bracket is narrower than tol.
    """
    A = SymMatrix.of(A)
    cfg = config or _experiment_config(ensemble, n=28)
    half = ensemble.k0 + ensemble.d * ensemble.lam * A.norm()
    lo, hi = -half, half
    history = []

    def g(s):
        curve = expected_mu_curve(ensemble, A, m, [-s], N, seed, cfg, workers)
        row = curve.rows[0]
        val = row.mean_mu - row.mean_mustar
        se = math.hypot(row.se_mu, row.se_mustar)
        history.append({"s": s, "g": val, "se": se})
        return val, se

    g_lo, _ = g(lo)
    g_hi, _ = g(hi)
    if not (g_lo >= 0 >= g_hi):
        probe = np.linspace(lo, hi, 7)
        curve = [(float(s),) + g(float(s)) for s in probe[1:-1]]
        raise BracketingError(
            f"no sign change on [{lo}, {hi}]: g({lo})={g_lo:.4g}, g({hi})={g_hi:.4g}",
            curve=curve)
    g_mid, se_mid = g_lo, 0.0
    for _ in range(80):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        g_mid, se_mid = g(mid)
        # a small gap alone does not localize the root when the crossing is
        # degenerate; accept it only when it is also lost in the noise
        if abs(g_mid) <= tol and abs(g_mid) <= 2.0 * se_mid:
            lo = hi = mid
            break
        if g_mid > 0:
            lo = mid
        else:
            hi = mid
    s_hat = 0.5 * (lo + hi)
    # slope of g from the evaluation history around the root
    hs = sorted(history, key=lambda r: r["s"])
    slope = 0.0
    for a, b in zip(hs, hs[1:]):
        if b["s"] - a["s"] > 1e-12 and min(abs(a["s"] - s_hat), abs(b["s"] - s_hat)) < 10 * tol + 1e-9:
            cand = abs((b["g"] - a["g"]) / (b["s"] - a["s"]))
            slope = max(slope, cand)
    se_near = min((r["se"] for r in history if abs(r["s"] - s_hat) < 10 * tol + 1e-9),
                  default=se_mid)
    s_se = se_near / slope if slope > 0 else float("nan")
    return EffectiveEstimate(A=A, s_hat=s_hat, s_hat_se=s_se,
                             diagnostics={"bracket_history": history,
                                          "m": m, "N": N, "tol": tol})


def _richardson_zero(deltas, values, points: int = 3) -> float:
    """Polynomial extrapolation of v(delta) to delta = 0 (Neville scheme)."""
    xs = list(deltas)[-points:]
    ys = list(values)[-points:]
    k = len(xs)
    tab = list(ys)
    for level in range(1, k):
        for i in range(k - level):
            tab[i] = (tab[i] * (0.0 - xs[i + level]) - tab[i + 1] * (0.0 - xs[i])) \
                / (xs[i] - xs[i + level])
    return tab[0]


def _cell_task(args):
    ensemble, A_bytes, d, schedule, L, n_per_unit, tol, seed, i = args
    try:
        r = sample_realization(ensemble, ((0,) * d, (L,) * d), seed, i)
        A = SymMatrix(np.frombuffer(A_bytes).reshape(d, d))
        sysm = TorusSystem(r, A, L, n_per_unit)
        w = None
        vals = []
        for delta in schedule:
            w, _ = sysm.solve(delta, tol=tol, w0=w)
            vals.append(float(delta * w[0]))
        return (i, -_richardson_zero(schedule, vals), vals, None)
    except Exception as exc:
        return (i, np.nan, [], f"{type(exc).__name__}: {exc}")


def effective_from_cell(ensemble: TileEnsemble, A, delta_schedule=(0.5, 0.25, 0.125),
                        L: int = 6, N: int = 32, seed: int = 0,
                        n_per_unit: int = 9, tol: float = 1e-10,
                        workers: int = 1) -> EffectiveEstimate:
    """Cell-problem route: average of extrapolated -delta w(0) over realizations."""
    A = SymMatrix.of(A)
    schedule = tuple(float(x) for x in delta_schedule)
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("delta schedule must be strictly decreasing")
    tasks = [(ensemble, A.a.tobytes(), ensemble.d, schedule, L, n_per_unit,
              tol, seed, i) for i in range(N)]
    results = _pmap(_cell_task, tasks, workers)
    ok = [(v, vals) for (_, v, vals, err) in results if err is None]
    errors = [(i, err) for (i, _, _, err) in results if err is not None]
    if len(ok) < 0.9 * N:
        raise ExperimentError(
            f"cell problem: only {len(ok)}/{N} realizations converged; "
            f"first error: {errors[0][1] if errors else '?'}")
    vals = np.array([v for v, _ in ok])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return EffectiveEstimate(
        A=A, cell_hat=float(vals.mean()), cell_se=se,
        diagnostics={"delta_schedule": list(schedule),
                     "delta_values": [vs for _, vs in ok],
                     "n_fail": len(errors), "errors": errors[:5]})


def effective_linear_matrix(ensemble: TileEnsemble, seed: int = 0, L: int = 6,
                            N: int = 32, delta_schedule=(0.5, 0.25, 0.125),
                            n_per_unit: int = 9, workers: int = 1) -> SymMatrix:
    """Assemble the effective coefficient matrix of a linear ensemble.

    Linearity is inherited by the effective operator, so d(d+1)/2 cell
    estimates at basis matrices determine it.
    """
    if not all(isinstance(t, Linear) for t in ensemble.tiles):
        raise ValueError("matrix assembly requires an all-linear ensemble")
    d = ensemble.d
    abar = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            E = np.zeros((d, d))
            E[i, j] = E[j, i] = 1.0
            est = effective_from_cell(ensemble, SymMatrix(E), delta_schedule,
                                      L, N, seed, n_per_unit, workers=workers)
            if i == j:
                abar[i, i] = -est.cell_hat
            else:
                abar[i, j] = abar[j, i] = -est.cell_hat / 2.0
    return SymMatrix(abar)


# ---------------------------------------------------------------------------
# variance decay
# ---------------------------------------------------------------------------

@dataclass
class DecayRow:
    m: int
    s: float
    n_ok: int
    mean_mu: float
    mean_mustar: float
    m2_mu: float
    m2_mustar: float
    se_mu: float
    se_mustar: float
    se_m2_mu: float
    se_m2_mustar: float

    @property
    def total(self) -> float:
        return self.m2_mu + self.m2_mustar


@dataclass
class DecayResult:
    rows: list
    s_hat: float
    s_hat_m: int
    tau_hat: float
    fit_residuals: list
    max_monotonicity_violation_se: float
    master_seed: int


def variance_decay_experiment(ensemble: TileEnsemble, m_range, N: int,
                              seed: int, config: MuEstimateConfig | None = None,
                              s_hat: float | None = None,
                              balance_N: int | None = None,
                              balance_tol: float = 0.05,
                              workers: int = 1) -> DecayResult:
    """Second moments of the balanced estimates across scales, with a geometric fit.

    The balancing shift is estimated once at the largest requested scale
    (with a reduced sample) and frozen across all scales; environments are
    shared across scales through the counter-based seeds.
    """
    m_range = sorted(int(m) for m in m_range)
    cfg = config or _experiment_config(ensemble, n=28)
    s_hat_m = m_range[-1]
    if s_hat is None:
        bal = balance_constant(ensemble, SymMatrix.zero(ensemble.d), s_hat_m,
                               balance_N or max(16, N // 8), balance_tol,
                               seed + 1, cfg, workers)
        s_hat = bal.s_hat

    rows = []
    for m in m_range:
        curve = expected_mu_curve(ensemble, SymMatrix.zero(ensemble.d), m,
                                  [-s_hat], N, seed, cfg, workers)
        r = curve.rows[0]
        rows.append(DecayRow(m=m, s=float(-s_hat), n_ok=r.n_ok,
                             mean_mu=r.mean_mu, mean_mustar=r.mean_mustar,
                             m2_mu=r.m2_mu, m2_mustar=r.m2_mustar,
                             se_mu=r.se_mu, se_mustar=r.se_mustar,
                             se_m2_mu=r.se_m2_mu, se_m2_mustar=r.se_m2_mustar))

    totals = np.array([r.total for r in rows])
    ms = np.array([r.m for r in rows], dtype=float)
    pos = totals > 1e-20
    if pos.sum() >= 2:
        slope, intercept = np.polyfit(ms[pos], np.log(totals[pos]), 1)
        tau_hat = float(np.exp(slope))
        resid = [float(np.log(t) - (intercept + slope * m)) if p else 0.0
                 for t, m, p in zip(totals, ms, pos)]
    else:
        tau_hat, resid = 0.0, [0.0] * len(rows)

    worst = 0.0
    for a, b in zip(rows, rows[1:]):
        se = math.hypot(math.hypot(a.se_m2_mu, b.se_m2_mu),
                        math.hypot(a.se_m2_mustar, b.se_m2_mustar))
        if b.total > a.total and se > 0:
            worst = max(worst, (b.total - a.total) / se)
    return DecayResult(rows, float(s_hat), s_hat_m, tau_hat, resid, worst, seed)


# ---------------------------------------------------------------------------
# homogenization error rates
# ---------------------------------------------------------------------------

@dataclass
class ErrorRateResult:
    eps_list: list
    gaps: dict            # eps -> per-realization sup-norm gaps
    medians: dict
    alpha_hat: float
    effective: LocalOperator
    master_seed: int


def _scaled_boundary(g: BoundaryData, eps: float) -> BoundaryData:
    """Data for the blown-up problem v(y) = u(eps y) / eps^2."""
    if g.kind == "zero":
        return g
    if g.kind == "affine":
        return BoundaryData.affine(g.data["p"] / eps, g.data["c"] / eps ** 2)
    if g.kind == "quadratic":
        return BoundaryData.quadratic(g.data["A"], g.data["p"] / eps,
                                      g.data["c"] / eps ** 2)
    raise ValueError("error-rate experiment needs closed-form boundary data")


def _error_task(args):
    (ensemble, eps, domain_lo, side, n, f_const, g, seed, i,
     effective, tol) = args
    try:
        d = ensemble.d
        big = Box(tuple(v / eps for v in domain_lo), side / eps)
        lo, shape = window_for(big)
        r = sample_realization(ensemble, (lo, shape), seed, i)
        vsys = DirichletSystem(field_of(r), big, n)
        v, _ = vsys.solve(float(f_const), _scaled_boundary(g, eps), tol=tol)
        u_eps = eps ** 2 * v.values

        hom = DirichletSystem(constant_field(effective, d), Box(domain_lo, side), n)
        u, _ = hom.solve(float(f_const), g, tol=tol)
        gap = float(np.abs(u_eps - u.values).max())
        return (i, eps, gap, None)
    except Exception as exc:
        return (i, eps, np.nan, f"{type(exc).__name__}: {exc}")


def error_rate_experiment(ensemble: TileEnsemble, domain: Box, f_const: float,
                          g: BoundaryData, eps_list, N: int, seed: int,
                          points_per_cell: int = 9,
                          effective: LocalOperator | None = None,
                          solver_tol: float = 1e-10,
                          workers: int = 1) -> ErrorRateResult:
    """Sup-norm gaps between oscillatory and homogenized Dirichlet solutions.

    Each oscillatory problem is solved in blown-up variables (tiles become
    unit cells), then rescaled and compared with the homogenized solve on the
    same node layout.  Requires at least 9 grid points per microstructure
    cell at every epsilon.
    """
    if points_per_cell < 9:
        raise ValueError("need at least 9 grid points per microstructure cell")
    eps_list = [float(e) for e in eps_list]
    if effective is None:
        if ensemble.deterministic():
            effective = ensemble.tiles[int(np.argmax(ensemble.probs))]
        elif all(isinstance(t, Linear) for t in ensemble.tiles):
            abar = effective_linear_matrix(ensemble, seed=seed + 17,
                                           workers=workers)
            effective = Linear(abar, 0.0, ensemble.lam)
        else:
            raise ValueError(
                "no effective operator supplied and the ensemble is neither "
                "deterministic nor linear")

    tasks = []
    for eps in eps_list:
        cells = domain.side / eps
        if abs(cells - round(cells)) > 1e-9:
            raise ValueError(f"domain side is not a whole number of cells at eps={eps}")
        n = points_per_cell * int(round(cells)) + 1
        for i in range(N):
            tasks.append((ensemble, eps, domain.lo, domain.side, n, f_const,
                          g, seed, i, effective, solver_tol))
    results = _pmap(_error_task, tasks, workers)

    gaps: dict = {eps: [] for eps in eps_list}
    n_fail = 0
    for (_, eps, gap, err) in results:
        if err is None:
            gaps[eps].append(gap)
        else:
            n_fail += 1
    if n_fail > 0.1 * len(results):
        raise ExperimentError(f"error-rate: {n_fail}/{len(results)} solves failed")
    medians = {eps: float(np.median(gs)) for eps, gs in gaps.items()}
    es = np.array(eps_list)
    med = np.array([medians[e] for e in eps_list])
    if np.all(med > 1e-14) and len(eps_list) >= 2:
        alpha_hat = float(np.polyfit(np.log(es), np.log(med), 1)[0])
    else:
        alpha_hat = float("inf")  # gaps at solver precision: deterministic case
    return ErrorRateResult(eps_list, gaps, medians, alpha_hat, effective, seed)
