"""Estimation of the curvature quantity of an operator field on a cube.

The target is  |U|^-1 sup{ |dGamma_u(U)| : u a supersolution in U },  which no
finite procedure computes exactly.  Every estimate here is a certified lower
bound: the reported value is the envelope measure of a verified discrete
supersolution (in fact an exact discrete solution, which can only enlarge the
subdifferential image relative to other supersolutions with the same boundary
data).  Boundary data ranges over a small closed-form family, optionally
refined by a budget-limited derivative-free search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield

import numpy as np

from .envelope import convex_envelope
from .grid import Box, GridFunction, as_box
from .operators import Linear, LocalOperator, OperatorField, SymMatrix, sym_eig
from .solver import BoundaryData, DirichletSystem


# ---------------------------------------------------------------------------
# constant-coefficient closed form:  sup{ det A : A >= 0, F(A) >= 0 }
# ---------------------------------------------------------------------------

@dataclass
class ConstCoeffMu:
    """Result of the determinant maximization for an x-independent operator."""

    value: float
    maximizer: SymMatrix | None
    iterations: int = 0
    feasible: bool = True


def _psd_clip(M: np.ndarray) -> np.ndarray:
    w, V = sym_eig(M)
    return (V * np.maximum(w, 0.0)) @ V.T


def _ray_max(op, M: np.ndarray, grow: bool = True) -> np.ndarray:
    """Scale M radially to the feasibility boundary of {F >= 0}."""
    def feas(t):
        return op.value(t * M) >= 0.0

    if not feas(1.0):
        lo, hi = 0.0, 1.0
    elif grow:
        hi = 2.0
        while feas(hi) and hi < 1e12:
            hi *= 2.0
        lo = hi / 2.0
    else:
        return M
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if feas(mid):
            lo = mid
        else:
            hi = mid
    return lo * M


def _num_grad(op, A: np.ndarray, h: float) -> np.ndarray:
    d = A.shape[0]
    G = np.zeros_like(A)
    for i in range(d):
        for j in range(i, d):
            E = np.zeros_like(A)
            E[i, j] = E[j, i] = 1.0
            gp = op.value(A + h * E)
            gm = op.value(A - h * E)
            G[i, j] = G[j, i] = (gp - gm) / (2 * h)
    return G


def mu_constant_coeff(op: LocalOperator, d: int = 2, n_starts: int = 6,
                      seed: int = 0, max_iter: int = 150) -> ConstCoeffMu:
    """Maximize det A over the feasible cone by projected log-det ascent.

    Multi-start; each iterate takes an ascent step (interior) or a tangent
    step along the active constraint, is clipped back to the positive
    semidefinite cone, and re-scaled radially to the constraint surface.
    Returns value 0 with no maximizer when F(0) <= 0, where the feasible set
    meets {det > 0} only trivially.
    """
    f0 = op.value(np.zeros((d, d)))
    if f0 <= 1e-14:
        return ConstCoeffMu(0.0, None, 0, feasible=False)
    scale = abs(f0)
    rng = np.random.default_rng(seed)
    starts = [np.eye(d)]
    for _ in range(n_starts - 1):
        B = rng.normal(size=(d, d))
        starts.append(_psd_clip(B @ B.T + 0.05 * np.eye(d)))
    best_det, best_A, total_it = 0.0, None, 0

    for A0 in starts:
        A = _ray_max(op, A0)
        if np.linalg.det(A) <= 0:
            A = _ray_max(op, np.eye(d))
        step = 0.5
        logdet = math.log(max(np.linalg.det(A), 1e-300))
        stall = 0
        for it in range(max_iter):
            total_it += 1
            if stall >= 8:
                break
            w, V = sym_eig(A)
            w = np.maximum(w, 1e-10 * max(np.abs(w).max(), 1e-10))
            G = (V * (1.0 / w)) @ V.T
            fa = op.value(A)
            if fa < 1e-9 * scale:
                N = _num_grad(op, A, 1e-7 * max(1.0, np.abs(A).max()))
                nn = float(np.tensordot(N, N))
                if nn > 1e-30:
                    G = G - (float(np.tensordot(G, N)) / nn) * N
            gnorm = math.sqrt(float(np.tensordot(G, G)))
            if gnorm < 1e-14:
                break
            moved = False
            eta = step * max(np.abs(w).max(), 1e-10) / gnorm
            for _ in range(6):
                cand = _ray_max(op, _psd_clip(A + eta * G))
                cd = np.linalg.det(cand)
                if cd > 0 and math.log(cd) > logdet + 1e-14:
                    gain = math.log(cd) - logdet
                    stall = stall + 1 if gain < 1e-12 else 0
                    A, logdet, moved = cand, math.log(cd), True
                    break
                eta *= 0.25
            if not moved:
                step *= 0.5
                if step < 1e-9:
                    break
        det = float(np.linalg.det(A))
        if det > best_det:
            best_det, best_A = det, A

    if best_A is None or best_det <= 1e-300:
        return ConstCoeffMu(0.0, None, total_it, feasible=False)

    # direction polish: quotient out the radial degree of freedom and refine
    # the remaining shape parameters derivative-free
    from scipy.optimize import minimize
    idx = np.tril_indices(d)
    w0, V0 = sym_eig(best_A)
    L0 = (V0 * np.sqrt(np.maximum(w0, 1e-12))) @ V0.T

    def neg_det(params):
        L = np.zeros((d, d))
        L[idx] = params
        M = _ray_max(op, L @ L.T)
        return -np.linalg.det(M)

    res = minimize(neg_det, L0[idx], method="Nelder-Mead",
                   options={"maxiter": 400, "xatol": 1e-10, "fatol": 1e-14})
    if -res.fun > best_det:
        L = np.zeros((d, d))
        L[idx] = res.x
        best_A = _ray_max(op, L @ L.T)
        best_det = float(np.linalg.det(best_A))
    return ConstCoeffMu(best_det, SymMatrix(best_A), total_it)


# ---------------------------------------------------------------------------
# pipeline estimates
# ---------------------------------------------------------------------------

@dataclass
class MuEstimateConfig:
    n: int = 82
    optimize: bool = False
    budget: int = 200
    solver_tol: float = 1e-10
    cert_tol: float = 1e-8
    max_tile_candidates: int = 2
    include_average: bool = True
    keep_solution: bool = False


@dataclass
class MuEstimate:
    """A certified lower bound: the envelope measure of a verified candidate."""

    value: float
    candidate: str
    solves: int
    certificate_residual: float
    resolution: int
    boundary: BoundaryData
    cube: Box
    solution: GridFunction | None = None


class _MeanOperator(LocalOperator):
    """Cell-count weighted average of the distinct tiles of a window."""

    def __init__(self, ops, weights):
        self.ops = list(ops)
        self.weights = np.asarray(weights, dtype=float)
        self.weights = self.weights / self.weights.sum()
        self.ellipticity = max(op.ellipticity for op in self.ops)

    def value(self, A) -> float:
        return float(sum(w * op.value(A) for w, op in zip(self.weights, self.ops)))

    def f0(self) -> float:
        return self.value(SymMatrix.zero(2))


def _op_key(op: LocalOperator):
    if isinstance(op, Linear):
        return ("lin", op.a.a.round(12).tobytes(), round(op.c, 12))
    from .operators import Bellman
    if isinstance(op, Bellman):
        return ("bel", op.mode, tuple(_op_key(ch) for ch in op.children))
    return ("other", id(op))


_CC_CACHE: dict = {}


def _cached_const_coeff(op: LocalOperator, d: int) -> ConstCoeffMu:
    key = _op_key(op)
    if key[0] == "other":
        return mu_constant_coeff(op, d)
    hit = _CC_CACHE.get(key)
    if hit is None:
        if len(_CC_CACHE) > 4096:
            _CC_CACHE.clear()
        hit = _CC_CACHE[key] = mu_constant_coeff(op, d)
    return hit


def _window_cells(box: Box):
    los = [int(np.floor(v)) for v in box.lo]
    his = [int(np.ceil(v)) for v in box.hi]
    ranges = [range(lo, max(hi, lo + 1)) for lo, hi in zip(los, his)]
    import itertools
    return list(itertools.product(*ranges))


def _distinct_tiles(field: OperatorField, box: Box):
    counts: dict = {}
    for cell in _window_cells(box):
        op = field.effective_tile(cell)
        key = _op_key(op)
        if key in counts:
            counts[key][1] += 1
        else:
            counts[key] = [op, 1]
    return list(counts.values())


def _boundary_candidates(field: OperatorField, box: Box,
                         cfg: MuEstimateConfig) -> list:
    """Closed-form boundary data: averaged, floor-parabola and per-tile quadratics."""
    d = box.d
    lam = max(field.ellipticity, 1.0 + 1e-12)
    tiles = _distinct_tiles(field, box)
    cands = [("zero", BoundaryData.zero())]

    lam_hat = min(op.f0() for op, _ in tiles)
    if lam_hat > 1e-12:
        # the conservative parabola that every cell accepts as a supersolution
        cands.append(("floor-quad",
                      BoundaryData.quadratic(SymMatrix((lam_hat / (d * lam)) * np.eye(d)))))

    if cfg.include_average:
        if len(tiles) == 1:
            avg = tiles[0][0]
        elif all(isinstance(t[0], Linear) for t in tiles):
            wts = np.array([t[1] for t in tiles], dtype=float)
            wts /= wts.sum()
            mean_a = sum(w * t[0].a.a for w, t in zip(wts, tiles))
            mean_c = float(sum(w * t[0].c for w, t in zip(wts, tiles)))
            avg = Linear(SymMatrix(mean_a), mean_c, lam)
        else:
            avg = _MeanOperator([t[0] for t in tiles], [t[1] for t in tiles])
        cc = _cached_const_coeff(avg, d)
        if cc.maximizer is not None and cc.value > 1e-14:
            cands.append(("mean-quad", BoundaryData.quadratic(cc.maximizer)))

    by_count = sorted(tiles, key=lambda t: -t[1])[:cfg.max_tile_candidates]
    for i, (op, _) in enumerate(by_count):
        if len(tiles) == 1 and cfg.include_average:
            break  # identical to the averaged candidate
        cc = _cached_const_coeff(op, d)
        if cc.maximizer is not None and cc.value > 1e-14:
            cands.append((f"tile-quad-{i}", BoundaryData.quadratic(cc.maximizer)))

    seen, out = set(), []
    for tag, bd in cands:
        if bd.kind == "quadratic":
            key = bd.data["A"].a.round(10).tobytes()
        else:
            key = tag
        if key in seen:
            continue
        seen.add(key)
        out.append((tag, bd))
    return out


def _edge_quadratic_samples(box: Box, n: int, params: np.ndarray) -> np.ndarray:
    """Boundary values from 4 corner + 4 edge-midpoint parameters (d=2).

    params order: [c00, c10, c01, c11, m_bottom, m_top, m_left, m_right]
    where cIJ is the corner at (lo + I*side, lo + J*side).
    """
    c00, c10, c01, c11, mb, mt, ml, mr = params

    def lagr(c0, m, c1, t):
        return c0 * (1 - t) * (1 - 2 * t) + m * 4 * t * (1 - t) + c1 * t * (2 * t - 1)

    h = box.side / (n - 1)
    xs = box.lo[0] + h * np.arange(n)
    ys = box.lo[1] + h * np.arange(n)
    tx = (xs - box.lo[0]) / box.side
    ty = (ys - box.lo[1]) / box.side
    vals = np.zeros((n, n))
    vals[:, 0] = lagr(c00, mb, c10, tx)     # y = lo edge
    vals[:, -1] = lagr(c01, mt, c11, tx)    # y = hi edge
    vals[0, :] = lagr(c00, ml, c01, ty)     # x = lo edge
    vals[-1, :] = lagr(c10, mr, c11, ty)    # x = hi edge
    mask = np.zeros((n, n), dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return vals[mask]


def _params_from_boundary(bd: BoundaryData, box: Box) -> np.ndarray:
    lo = np.asarray(box.lo)
    s = box.side
    anchors = np.array([
        lo, lo + [s, 0], lo + [0, s], lo + [s, s],
        lo + [0.5 * s, 0], lo + [0.5 * s, s], lo + [0, 0.5 * s], lo + [s, 0.5 * s],
    ])
    return bd.values_at(anchors)


def mu_estimate(field: OperatorField, cube, config: MuEstimateConfig | None = None) -> MuEstimate:
    """Certified lower-bound estimate of the curvature quantity on a cube.

    Pipeline: build closed-form boundary candidates (averaged-coefficient
    quadratic with zero fallback, conservative parabola, per-tile quadratics),
    solve the exact equation F(D^2 u, x) = 0 for each, keep the largest
    envelope measure, then optionally refine the boundary data by coordinate
    search within the solve budget.
    """
    cfg = config or MuEstimateConfig()
    box = as_box(cube)
    n = cfg.n
    sysm = DirichletSystem(field, box, n)
    vol = box.volume()

    def run(bd: BoundaryData):
        u, rep = sysm.solve(0.0, bd, tol=cfg.solver_tol)
        resid = float(sysm.operator_values(u.values.ravel()).min())
        val = convex_envelope(u).measure(box) / vol
        return val, resid, u

    best = None
    solves = 0
    for tag, bd in _boundary_candidates(field, box, cfg):
        val, resid, u = run(bd)
        solves += 1
        if resid < -cfg.cert_tol:
            continue  # not certified; never report it
        if best is None or val > best[0]:
            best = (val, tag, bd, resid, u)

    if best is None:
        raise RuntimeError("no certified candidate produced (solver residuals too large)")

    if cfg.optimize and box.d == 2:
        val0, tag0, bd0, resid0, u0 = best
        params = _params_from_boundary(bd0, box) if bd0.kind != "samples" \
            else _params_from_boundary(BoundaryData.zero(), box)
        spread = float(np.ptp(params))
        step = max(0.25 * max(spread, 1.0), 1e-3)
        best_val, best_params, best_resid, best_u = val0, params.copy(), resid0, u0
        while solves < cfg.budget and step > 1e-4 * max(spread, 1.0):
            improved = False
            for i in range(8):
                if solves >= cfg.budget:
                    break
                for sgn in (1.0, -1.0):
                    if solves >= cfg.budget:
                        break
                    trial = best_params.copy()
                    trial[i] += sgn * step
                    bd = BoundaryData.samples(_edge_quadratic_samples(box, n, trial))
                    val, resid, u = run(bd)
                    solves += 1
                    if resid >= -cfg.cert_tol and val > best_val + 1e-12:
                        best_val, best_params, best_resid, best_u = val, trial, resid, u
                        improved = True
                        break
            if not improved:
                step *= 0.5
        if best_val > val0 + 1e-12:
            best = (best_val, "search",
                    BoundaryData.samples(_edge_quadratic_samples(box, n, best_params)),
                    best_resid, best_u)

    val, tag, bd, resid, u = best
    return MuEstimate(value=val, candidate=tag, solves=solves,
                      certificate_residual=resid, resolution=n,
                      boundary=bd, cube=box,
                      solution=u if cfg.keep_solution else None)


def mu_star_estimate(field: OperatorField, cube,
                     config: MuEstimateConfig | None = None) -> MuEstimate:
    """The subsolution twin: exactly the estimate of the starred field."""
    return mu_estimate(field.star(), cube, config)


# ---------------------------------------------------------------------------
# tiny brute-force oracle
# ---------------------------------------------------------------------------

def _relax_upward(sysm: DirichletSystem, u_flat: np.ndarray,
                  tol: float = 1e-11, max_sweeps: int = 5000) -> np.ndarray:
    """Project onto the discrete supersolution set by raising interior nodes.

    Monotone (Jacobi-style) iteration: each sweep replaces every interior
    value by the smallest value restoring its nodewise inequality, never
    lowering anything; converges to the least supersolution above the input.
    """
    h2 = sysm.h ** 2
    den = 2.0 * sysm.Wn.sum(axis=2) / h2        # (n_int, C)
    pad = np.arange(sysm.max_children)[None, :] >= sysm.n_children[:, None]
    for _ in range(max_sweeps):
        nbsum = np.empty((sysm.n_int, len(sysm.dirs)))
        for k, off in enumerate(sysm.dir_offsets):
            nbsum[:, k] = (u_flat[sysm.interior_flat + off]
                           + u_flat[sysm.interior_flat - off])
        num = np.einsum("nck,nk->nc", sysm.Wn, nbsum) / h2 - sysm.cn
        ustar = num / np.where(den > 0, den, 1.0)
        ustar[pad & ~sysm.is_max[:, None]] = -np.inf
        ustar[pad & sysm.is_max[:, None]] = np.inf
        target = np.where(sysm.is_max, np.min(ustar, axis=1), np.max(ustar, axis=1))
        cur = u_flat[sysm.interior_flat]
        newu = np.maximum(cur, target)
        gain = float(np.max(newu - cur))
        u_flat[sysm.interior_flat] = newu
        if gain <= tol:
            break
    return u_flat


def mu_bruteforce_tiny(field: OperatorField, cube, n: int = 9,
                       samples: int = 200, seed: int = 0) -> float:
    """Randomized search over the discrete supersolution set on a tiny grid.

    Random candidates (quadratics, tilts, nodal noise) are projected onto
    {F_h >= 0} by upward relaxation; returns the best envelope measure found,
    a lower bound for the discrete supremum.
    """
    if n > 9:
        raise ValueError("brute force is restricted to tiny grids (n <= 9)")
    box = as_box(cube)
    d = box.d
    sysm = DirichletSystem(field, box, n)
    rng = np.random.default_rng(seed)
    vol = box.volume()
    pts = sysm.points
    center = np.asarray(box.center)
    scale = max(abs(field.effective_tile(cell).f0())
                for cell in _window_cells(box))
    scale = max(scale, 1.0)
    best = 0.0
    for k in range(samples):
        if k == 0:
            u0 = np.zeros(len(pts))
        else:
            B = rng.normal(size=(d, d))
            S = (B @ B.T) * rng.uniform(0.0, scale)
            p = rng.normal(size=d) * rng.uniform(0.0, 0.5) * scale
            x = pts - center
            u0 = 0.5 * np.einsum("ni,ij,nj->n", x, S, x) + x @ p
            if k % 3 == 2:
                u0 += rng.normal(size=len(pts)) * 0.05 * scale * sysm.h ** 2
        u_flat = _relax_upward(sysm, u0.copy())
        resid = float(sysm.operator_values(u_flat).min())
        if resid < -1e-8:
            continue
        gf = GridFunction(box, u_flat.reshape(sysm.shape))
        best = max(best, convex_envelope(gf).measure(box) / vol)
    return best
