"""Monotone finite-difference solver for F(D^2 u, x) = f.

The Hessian is discretized by second differences along a fixed set of lattice
directions (axes plus axis pairs), with per-cell nonnegative weights that
reconstruct each coefficient matrix exactly.  Nonnegativity of the weights
makes the scheme monotone, which gives a discrete comparison principle;
Bellman tiles are handled by Howard policy iteration with exact sparse solves
per policy.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .grid import Box, GridFunction, as_box
from .operators import (Bellman, Linear, LocalOperator, OperatorField,
                        SymMatrix)


class StencilError(ValueError):
    """A coefficient matrix cannot be decomposed with nonnegative weights."""


class NonConvergenceError(RuntimeError):
    """Policy iteration failed to reach the requested tolerance."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def directions(d: int) -> list:
    """Stencil directions: unit axes, then (e_i + e_j) and (e_i - e_j), i < j."""
    dirs = [tuple(int(i == k) for k in range(d)) for i in range(d)]
    for i in range(d - 1):
        for j in range(i + 1, d):
            plus = [0] * d
            plus[i], plus[j] = 1, 1
            minus = [0] * d
            minus[i], minus[j] = 1, -1
            dirs.append(tuple(plus))
            dirs.append(tuple(minus))
    return dirs


def stencil_weights(a, tol: float = 1e-12) -> np.ndarray:
    """Nonnegative direction weights with  a = sum_v alpha_v v v^T  exactly.

    Requires diagonal dominance (in d=2: |a12| <= min(a11, a22)); otherwise
    no monotone decomposition over this stencil exists and StencilError is
    raised.
    """
    a = SymMatrix.of(a).a
    d = a.shape[0]
    K = d + d * (d - 1)
    alpha = np.zeros(K)
    k = d
    # slack[i] = a_ii - sum_{j != i} |a_ij| must be nonnegative
    slack = 2 * np.diag(a) - np.abs(a).sum(axis=1)
    if np.min(slack) < -tol:
        raise StencilError(
            f"matrix {a.tolist()} is not diagonally dominant; "
            "no monotone stencil decomposition")
    alpha[:d] = np.maximum(slack, 0.0)
    for i in range(d - 1):
        for j in range(i + 1, d):
            alpha[k] = max(a[i, j], 0.0)
            alpha[k + 1] = max(-a[i, j], 0.0)
            k += 2
    # reconstruction is exact by construction; verify defensively
    recon = np.zeros_like(a)
    for w, v in zip(alpha, directions(d)):
        vv = np.asarray(v, dtype=float)
        recon += w * np.outer(vv, vv)
    if np.abs(recon - a).max() > 1e-12 * max(1.0, np.abs(a).max()):
        raise StencilError("stencil reconstruction failed")
    return alpha


def assert_decomposable(op: LocalOperator, where: str = "tile") -> None:
    """Fail fast if a tile (or any Bellman child) has no monotone stencil."""
    if isinstance(op, Linear):
        try:
            stencil_weights(op.a)
        except StencilError as exc:
            raise StencilError(f"{where}: {exc}") from None
    elif isinstance(op, Bellman):
        for i, ch in enumerate(op.children):
            assert_decomposable(ch, f"{where} child {i}")
    else:
        raise StencilError(
            f"{where}: operator {type(op).__name__} is not stencil-decomposable")


@dataclass(frozen=True)
class Stencil:
    """Per-cell decomposition of a coefficient matrix over the fixed directions."""

    dirs: tuple
    weights: np.ndarray


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = np.inf
    policy_switches: int = 0
    wall_time: float = 0.0
    residual_history: list = dfield(default_factory=list)


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryData:
    """Closed-form Dirichlet data tags evaluated at boundary nodes."""

    kind: str
    data: dict

    @classmethod
    def zero(cls) -> "BoundaryData":
        return cls("zero", {})

    @classmethod
    def affine(cls, p, c: float = 0.0) -> "BoundaryData":
        return cls("affine", {"p": np.asarray(p, dtype=float), "c": float(c)})

    @classmethod
    def quadratic(cls, A, p=None, c: float = 0.0) -> "BoundaryData":
        A = SymMatrix.of(A)
        p = np.zeros(A.d) if p is None else np.asarray(p, dtype=float)
        return cls("quadratic", {"A": A, "p": p, "c": float(c)})

    @classmethod
    def samples(cls, values) -> "BoundaryData":
        """Explicit values, aligned with boundary nodes in row-major grid order."""
        return cls("samples", {"values": np.asarray(values, dtype=float)})

    def values_at(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(len(pts))
        if self.kind == "affine":
            return pts @ self.data["p"] + self.data["c"]
        if self.kind == "quadratic":
            A = self.data["A"].a
            return 0.5 * np.einsum("ni,ij,nj->n", pts, A, pts) \
                + pts @ self.data["p"] + self.data["c"]
        raise ValueError(f"cannot evaluate boundary tag {self.kind!r} pointwise")

    def boundary_values(self, box: Box, n: int) -> np.ndarray:
        shape = (n,) * box.d
        mask = _boundary_mask(shape)
        if self.kind == "samples":
            vals = self.data["values"]
            if vals.shape != (int(mask.sum()),):
                raise ValueError(
                    f"samples boundary data has {vals.shape[0]} values, "
                    f"grid boundary has {int(mask.sum())} nodes")
            return vals
        pts = _node_points(box, n)[mask.ravel()]
        return self.values_at(pts)


def _boundary_mask(shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    d = len(shape)
    for axis in range(d):
        sl = [slice(None)] * d
        sl[axis] = 0
        m[tuple(sl)] = True
        sl[axis] = -1
        m[tuple(sl)] = True
    return m


def _node_points(box: Box, n: int) -> np.ndarray:
    h = box.side / (n - 1)
    axes = [box.lo[k] + h * np.arange(n) for k in range(box.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


# ---------------------------------------------------------------------------
# per-cell operator resolution
# ---------------------------------------------------------------------------

@dataclass
class _CellOp:
    weights: np.ndarray   # (n_children, K)
    consts: np.ndarray    # (n_children,)
    mode: str             # 'min' | 'max' ('min' with one child for linear tiles)


def _resolve_cell(field: OperatorField, cell, dirs) -> _CellOp:
    op = field.effective_tile(cell)
    if isinstance(op, Linear):
        children, mode = (op,), "min"
    elif isinstance(op, Bellman):
        children, mode = op.children, op.mode
    else:
        raise StencilError(
            f"cell {cell}: operator {type(op).__name__} is not stencil-decomposable")
    K = len(dirs)
    W = np.zeros((len(children), K))
    c = np.zeros(len(children))
    for i, ch in enumerate(children):
        if not isinstance(ch, Linear):
            raise StencilError(f"cell {cell}: Bellman child {i} is not linear")
        try:
            W[i] = stencil_weights(ch.a)
        except StencilError as exc:
            raise StencilError(f"cell {cell}: {exc}") from None
        c[i] = ch.c
    return _CellOp(W, c, mode)


# ---------------------------------------------------------------------------
# Dirichlet problems
# ---------------------------------------------------------------------------

class DirichletSystem:
    """Reusable discretization of one field on one grid.

    Caches the node indexing, the per-cell operator data and (for all-linear
    fields) the sparse factorization, so that repeated solves with different
    boundary data amount to a triangular backsolve.
    """

    def __init__(self, field: OperatorField, box, n: int):
        box = as_box(box)
        if n < 3:
            raise ValueError("need at least one interior node per axis")
        self.field = field
        self.box = box
        self.n = n
        self.d = box.d
        self.h = box.side / (n - 1)
        shape = (n,) * self.d
        self.shape = shape
        self.dirs = tuple(directions(self.d))
        self.points = _node_points(box, n)

        inner = np.ones(shape, dtype=bool)
        inner[_boundary_mask(shape)] = False
        self.interior_flat = np.flatnonzero(inner.ravel())
        self.boundary_flat = np.flatnonzero(~inner.ravel())
        self.n_int = len(self.interior_flat)
        self.inv = np.full(n ** self.d, -1, dtype=np.int64)
        self.inv[self.interior_flat] = np.arange(self.n_int)

        cells = np.floor(self.points[self.interior_flat]).astype(np.int64)
        uniq, node_cell = np.unique(cells, axis=0, return_inverse=True)
        self.node_cell = node_cell
        self.cell_ops = [_resolve_cell(field, tuple(int(v) for v in row), self.dirs)
                         for row in uniq]
        self.max_children = max(op.weights.shape[0] for op in self.cell_ops)
        self.is_linear = self.max_children == 1 and all(
            op.weights.shape[0] == 1 for op in self.cell_ops)

        strides = np.array([n ** (self.d - 1 - k) for k in range(self.d)],
                           dtype=np.int64)
        self.dir_offsets = np.array([np.dot(v, strides) for v in self.dirs],
                                    dtype=np.int64)

        # padded per-node children arrays
        Wn = np.zeros((self.n_int, self.max_children, len(self.dirs)))
        cn = np.zeros((self.n_int, self.max_children))
        n_children = np.zeros(self.n_int, dtype=np.int64)
        is_max = np.zeros(self.n_int, dtype=bool)
        for ci, op in enumerate(self.cell_ops):
            sel = node_cell == ci
            k = op.weights.shape[0]
            Wn[sel, :k] = op.weights
            cn[sel, :k] = op.consts
            n_children[sel] = k
            is_max[sel] = op.mode == "max"
        self.Wn, self.cn = Wn, cn
        self.n_children = n_children
        self.is_max = is_max
        self._lu = None
        self._policy = np.zeros(self.n_int, dtype=np.int64)
        if self.is_linear:
            self._lu = spla.splu(self._matrix(self._policy).tocsc())

    # -- discrete operator pieces ------------------------------------------

    def second_differences(self, u_flat: np.ndarray) -> np.ndarray:
        """(n_int, K) array of (u(x+hv) - 2u(x) + u(x-hv)) / h^2."""
        out = np.empty((self.n_int, len(self.dirs)))
        ui = u_flat[self.interior_flat]
        for k, off in enumerate(self.dir_offsets):
            out[:, k] = (u_flat[self.interior_flat + off] - 2.0 * ui
                         + u_flat[self.interior_flat - off]) / self.h ** 2
        return out

    def child_values(self, u_flat: np.ndarray) -> np.ndarray:
        """(n_int, max_children) values of each child operator at each node."""
        S = self.second_differences(u_flat)
        vals = -np.einsum("nk,nck->nc", S, self.Wn) + self.cn
        # mask padded children so they never win the min/max
        pad = np.arange(self.max_children)[None, :] >= self.n_children[:, None]
        vals[pad & ~self.is_max[:, None]] = np.inf
        vals[pad & self.is_max[:, None]] = -np.inf
        return vals

    def operator_values(self, u_flat: np.ndarray) -> np.ndarray:
        vals = self.child_values(u_flat)
        out = np.where(self.is_max, np.max(vals, axis=1), np.min(vals, axis=1))
        return out

    def best_policy(self, u_flat: np.ndarray) -> np.ndarray:
        vals = self.child_values(u_flat)
        return np.where(self.is_max, np.argmax(vals, axis=1), np.argmin(vals, axis=1))

    # -- assembly and solving ----------------------------------------------

    def _matrix(self, policy: np.ndarray) -> sparse.csr_matrix:
        W = np.take_along_axis(self.Wn, policy[:, None, None], axis=1)[:, 0, :]
        h2 = self.h ** 2
        rows = [np.arange(self.n_int)]
        cols = [np.arange(self.n_int)]
        vals = [2.0 * W.sum(axis=1) / h2]
        for k, off in enumerate(self.dir_offsets):
            for sgn in (+1, -1):
                nb = self.interior_flat + sgn * off
                nb_int = self.inv[nb]
                m = nb_int >= 0
                rows.append(np.arange(self.n_int)[m])
                cols.append(nb_int[m])
                vals.append(-W[m, k] / h2)
        A = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_int, self.n_int))
        return A.tocsr()

    def _rhs(self, policy: np.ndarray, f_int: np.ndarray,
             u_bd: np.ndarray) -> np.ndarray:
        W = np.take_along_axis(self.Wn, policy[:, None, None], axis=1)[:, 0, :]
        c = np.take_along_axis(self.cn, policy[:, None], axis=1)[:, 0]
        h2 = self.h ** 2
        rhs = f_int - c
        full_bd = np.zeros(self.n ** self.d)
        full_bd[self.boundary_flat] = u_bd
        for k, off in enumerate(self.dir_offsets):
            for sgn in (+1, -1):
                nb = self.interior_flat + sgn * off
                m = self.inv[nb] < 0
                rhs[m] += W[m, k] / h2 * full_bd[nb[m]]
        return rhs

    def solve(self, f=0.0, g: BoundaryData = None, tol: float = 1e-10,
              max_policy_iters: int = 100):
        """Solve the Dirichlet problem; returns (GridFunction, SolveReport)."""
        t0 = time.perf_counter()
        g = g or BoundaryData.zero()
        u_bd = g.boundary_values(self.box, self.n)
        f_int = self._f_interior(f)

        u_flat = np.zeros(self.n ** self.d)
        u_flat[self.boundary_flat] = u_bd
        report = SolveReport()

        if self.is_linear:
            policy = self._policy
            rhs = self._rhs(policy, f_int, u_bd)
            u_flat[self.interior_flat] = self._lu.solve(rhs)
            report.iterations = 1
            report.residual = float(
                np.abs(self.operator_values(u_flat) - f_int).max())
            report.residual_history = [report.residual]
        else:
            policy = self._policy.copy()
            for it in range(max_policy_iters):
                A = self._matrix(policy)
                rhs = self._rhs(policy, f_int, u_bd)
                u_flat[self.interior_flat] = spla.spsolve(A.tocsc(), rhs)
                res = float(np.abs(self.operator_values(u_flat) - f_int).max())
                report.iterations = it + 1
                report.residual = res
                report.residual_history.append(res)
                new_policy = self.best_policy(u_flat)
                switches = int(np.count_nonzero(new_policy != policy))
                report.policy_switches += switches
                if res <= tol:
                    break
                if switches == 0:
                    break
                policy = new_policy
            else:
                report.wall_time = time.perf_counter() - t0
                raise NonConvergenceError(
                    f"policy iteration did not reach tol={tol} in "
                    f"{max_policy_iters} iterations (residual {report.residual:.3e})",
                    report)
            if report.residual > tol:
                report.wall_time = time.perf_counter() - t0
                raise NonConvergenceError(
                    f"policy iteration stalled at residual {report.residual:.3e}",
                    report)
            self._policy = policy
        report.wall_time = time.perf_counter() - t0
        u = GridFunction(self.box, u_flat.reshape(self.shape))
        return u, report

    def _f_interior(self, f) -> np.ndarray:
        if isinstance(f, GridFunction):
            if f.n != self.n or not np.allclose(f.box.lo, self.box.lo):
                raise ValueError("forcing grid does not match the solve grid")
            return f.values.ravel()[self.interior_flat]
        if callable(f):
            pts = self.points[self.interior_flat]
            return np.asarray(f(*[pts[:, k] for k in range(self.d)]), dtype=float)
        return np.full(self.n_int, float(f))


def solve_dirichlet(field: OperatorField, box, n: int, f=0.0,
                    g: BoundaryData = None, tol: float = 1e-10,
                    max_policy_iters: int = 100):
    """One-shot Dirichlet solve of F(D^2 u, x) = f with u = g on the boundary.

    Parameters
    ----------
    field : OperatorField
        The (possibly transformed) operator field; every reachable tile must
        be stencil-decomposable.
    box, n : domain cube and nodes per side.
    f : GridFunction, callable or scalar forcing.
    g : BoundaryData tag (defaults to zero).
    tol : interior residual tolerance in the max norm.

    Returns
    -------
    (GridFunction, SolveReport)
    """
    return DirichletSystem(field, box, n).solve(f, g, tol, max_policy_iters)


def apply_operator(field: OperatorField, u: GridFunction) -> np.ndarray:
    """Nodewise discrete operator values F_h(D^2_h u, x) at interior nodes.

    Returns an array of shape (n-2,)^d.  A nonnegative minimum certifies
    discrete supersolution membership.
    """
    sys_ = DirichletSystem(field, u.box, u.n)
    vals = sys_.operator_values(u.values.ravel())
    return vals.reshape((u.n - 2,) * u.d)


# ---------------------------------------------------------------------------
# approximate cell problem on a torus
# ---------------------------------------------------------------------------

class TorusSystem:
    """Discretization of  delta w + F(A + D^2 w, y) = 0  on [0, L)^d periodic."""

    def __init__(self, realization, A, L: int, n_per_unit: int = 9):
        from .environment import field_of  # deferred: environment imports solver

        if L != int(L) or L < 1:
            raise ValueError("torus side must be a positive whole number of tiles")
        self.L = int(L)
        self.r = int(n_per_unit)
        self.d = realization.d
        self.nt = self.L * self.r
        self.h = 1.0 / self.r
        self.A = SymMatrix.of(A)
        field = field_of(realization).translate(self.A)
        self.dirs = tuple(directions(self.d))

        shape = (self.nt,) * self.d
        self.shape = shape
        N = self.nt ** self.d
        idx = np.arange(N)
        multi = np.stack(np.unravel_index(idx, shape), axis=1)
        cells = (multi // self.r) % self.L
        lo = np.asarray(realization.lo)
        uniq, node_cell = np.unique(cells, axis=0, return_inverse=True)
        ops = []
        for row in uniq:
            cell = tuple(int(v) for v in (lo + (row - lo) % self.L))
            ops.append(_resolve_cell(field, cell, self.dirs))
        self.max_children = max(op.weights.shape[0] for op in ops)
        Wn = np.zeros((N, self.max_children, len(self.dirs)))
        cn = np.zeros((N, self.max_children))
        n_children = np.zeros(N, dtype=np.int64)
        is_max = np.zeros(N, dtype=bool)
        for ci, op in enumerate(ops):
            sel = node_cell == ci
            k = op.weights.shape[0]
            Wn[sel, :k] = op.weights
            cn[sel, :k] = op.consts
            n_children[sel] = k
            is_max[sel] = op.mode == "max"
        self.Wn, self.cn = Wn, cn
        self.n_children, self.is_max = n_children, is_max
        self.is_linear = self.max_children == 1

        # periodic neighbor tables per direction
        self.nb_plus = []
        self.nb_minus = []
        for v in self.dirs:
            vp = (multi + np.asarray(v)) % self.nt
            vm = (multi - np.asarray(v)) % self.nt
            self.nb_plus.append(np.ravel_multi_index(vp.T, shape))
            self.nb_minus.append(np.ravel_multi_index(vm.T, shape))

    def child_values(self, w: np.ndarray) -> np.ndarray:
        h2 = self.h ** 2
        S = np.empty((len(w), len(self.dirs)))
        for k in range(len(self.dirs)):
            S[:, k] = (w[self.nb_plus[k]] - 2.0 * w + w[self.nb_minus[k]]) / h2
        vals = -np.einsum("nk,nck->nc", S, self.Wn) + self.cn
        pad = np.arange(self.max_children)[None, :] >= self.n_children[:, None]
        vals[pad & ~self.is_max[:, None]] = np.inf
        vals[pad & self.is_max[:, None]] = -np.inf
        return vals

    def residual(self, w: np.ndarray, delta: float) -> np.ndarray:
        vals = self.child_values(w)
        Fv = np.where(self.is_max, np.max(vals, axis=1), np.min(vals, axis=1))
        return delta * w + Fv

    def _matrix_rhs(self, policy: np.ndarray, delta: float):
        N = self.nt ** self.d
        W = np.take_along_axis(self.Wn, policy[:, None, None], axis=1)[:, 0, :]
        c = np.take_along_axis(self.cn, policy[:, None], axis=1)[:, 0]
        h2 = self.h ** 2
        rows = [np.arange(N)]
        cols = [np.arange(N)]
        vals = [delta + 2.0 * W.sum(axis=1) / h2]
        for k in range(len(self.dirs)):
            for nb in (self.nb_plus[k], self.nb_minus[k]):
                rows.append(np.arange(N))
                cols.append(nb)
                vals.append(-W[:, k] / h2)
        A = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N, N)).tocsc()
        return A, -c

    def solve(self, delta: float, tol: float = 1e-10, w0=None,
              max_policy_iters: int = 100):
        if delta <= 0:
            raise ValueError("delta must be positive")
        N = self.nt ** self.d
        w = np.zeros(N) if w0 is None else np.asarray(w0, dtype=float).copy()
        report = SolveReport()
        t0 = time.perf_counter()
        if self.is_linear:
            policy = np.zeros(N, dtype=np.int64)
            A, rhs = self._matrix_rhs(policy, delta)
            w = spla.spsolve(A, rhs)
            report.iterations = 1
            report.residual = float(np.abs(self.residual(w, delta)).max())
            report.residual_history = [report.residual]
        else:
            vals = self.child_values(w)
            policy = np.where(self.is_max, np.argmax(vals, axis=1),
                              np.argmin(vals, axis=1))
            for it in range(max_policy_iters):
                A, rhs = self._matrix_rhs(policy, delta)
                w = spla.spsolve(A, rhs)
                res = float(np.abs(self.residual(w, delta)).max())
                report.iterations = it + 1
                report.residual = res
                report.residual_history.append(res)
                vals = self.child_values(w)
                new_policy = np.where(self.is_max, np.argmax(vals, axis=1),
                                      np.argmin(vals, axis=1))
                switches = int(np.count_nonzero(new_policy != policy))
                report.policy_switches += switches
                if res <= tol or switches == 0:
                    break
                policy = new_policy
            if report.residual > tol:
                report.wall_time = time.perf_counter() - t0
                raise NonConvergenceError(
                    f"cell-problem policy iteration stalled at "
                    f"residual {report.residual:.3e}", report)
        report.wall_time = time.perf_counter() - t0
        return w, report


def solve_cell(realization, A, delta: float, L: int, tol: float = 1e-10,
               n_per_unit: int = 9, w0=None):
    """Solve the damped stationary problem on an L-tile torus.

    Returns (w as a GridFunction on the closed torus cube, delta * w(0),
    SolveReport).  The value satisfies |delta w(0)| <= sup_y |F(A, y)| by
    comparison with constants.
    """
    sys_ = TorusSystem(realization, A, L, n_per_unit)
    w, report = sys_.solve(delta, tol=tol, w0=w0)
    nt = sys_.nt
    arr = w.reshape(sys_.shape)
    # wrap-pad so the closed cube carries all values
    padded = arr
    for axis in range(sys_.d):
        first = np.take(padded, [0], axis=axis)
        padded = np.concatenate([padded, first], axis=axis)
    u = GridFunction(Box((0.0,) * sys_.d, float(L)), padded)
    value = float(delta * arr[(0,) * sys_.d])
    return u, value, report
