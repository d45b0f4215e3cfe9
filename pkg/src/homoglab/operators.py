"""Algebra of uniformly elliptic local operators and lazily transformed fields.

A local operator maps a symmetric matrix A (a candidate Hessian) to a real
value, decreasing in A.  Ellipticity Lambda > 1 means the operator is
sandwiched between the two extremal operators with that ellipticity.  Fields
attach a local operator to every unit lattice cell and carry a lazy chain of
the three transforms used throughout: sign involution (star), argument
translation by a fixed matrix, and an additive shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Union

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite or malformed numeric input."""


class OutOfWindowError(KeyError):
    """Raised when a field is evaluated outside its realization window."""


# ---------------------------------------------------------------------------
# symmetric matrices
# ---------------------------------------------------------------------------

def _sym_eig_2x2(a):
    # closed-form eigendecomposition of a symmetric 2x2 matrix
    p, q, r = a[0, 0], a[0, 1], a[1, 1]
    half_tr = 0.5 * (p + r)
    disc = math.hypot(0.5 * (p - r), q)
    w = np.array([half_tr - disc, half_tr + disc])
    if disc <= 1e-300:
        return w, np.eye(2)
    # eigenvector for the smaller eigenvalue
    if abs(q) > abs(p - r) * 0.5:
        v0 = np.array([w[0] - r, q])
    else:
        v0 = np.array([q, w[0] - p]) if p > r else np.array([w[0] - r, q])
    n0 = math.hypot(v0[0], v0[1])
    if n0 <= 1e-300:
        return w, np.eye(2)
    v0 = v0 / n0
    V = np.column_stack([v0, np.array([-v0[1], v0[0]])])
    return w, V


def _sym_eig_jacobi(a, tol=1e-12, max_sweeps=64):
    # cyclic Jacobi iteration; adequate for the small dimensions used here
    d = a.shape[0]
    A = a.astype(float).copy()
    V = np.eye(d)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(d - 1):
            for j in range(i + 1, d):
                off = max(off, abs(A[i, j]))
        if off <= tol * max(1.0, np.abs(np.diag(A)).max()):
            break
        for i in range(d - 1):
            for j in range(i + 1, d):
                if abs(A[i, j]) <= 1e-300:
                    continue
                theta = 0.5 * math.atan2(2.0 * A[i, j], A[j, j] - A[i, i])
                c, s = math.cos(theta), math.sin(theta)
                R = np.eye(d)
                R[i, i] = R[j, j] = c
                R[i, j] = s
                R[j, i] = -s
                A = R.T @ A @ R
                V = V @ R
    w = np.diag(A).copy()
    order = np.argsort(w)
    return w[order], V[:, order]


def sym_eig(a):
    """Eigenvalues (ascending) and eigenvectors of a symmetric matrix."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 2:
        return _sym_eig_2x2(a)
    return _sym_eig_jacobi(a)


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Immutable real symmetric matrix with a reproducible split A = A+ - A-."""

    a: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.a, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError("symmetric matrix must be square")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("symmetric matrix entries must be finite")
        m = 0.5 * (m + m.T)
        m.flags.writeable = False
        object.__setattr__(self, "a", m)

    @classmethod
    def of(cls, entries) -> "SymMatrix":
        return entries if isinstance(entries, SymMatrix) else cls(np.asarray(entries, dtype=float))

    @classmethod
    def identity(cls, d: int = 2) -> "SymMatrix":
        return cls(np.eye(d))

    @classmethod
    def zero(cls, d: int = 2) -> "SymMatrix":
        return cls(np.zeros((d, d)))

    @classmethod
    def diag(cls, *vals) -> "SymMatrix":
        return cls(np.diag(np.asarray(vals, dtype=float)))

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.a))

    def det(self) -> float:
        return float(np.linalg.det(self.a))

    def eig(self):
        return sym_eig(self.a)

    def norm(self) -> float:
        """Spectral norm: square root of the largest eigenvalue of A^2."""
        w, _ = self.eig()
        return float(np.abs(w).max())

    def plus_minus(self):
        """Split A = P - N with P N = 0 and P, N positive semidefinite."""
        w, V = self.eig()
        plus = (V * np.maximum(w, 0.0)) @ V.T
        minus = (V * np.maximum(-w, 0.0)) @ V.T
        return SymMatrix(plus), SymMatrix(minus)

    def __add__(self, other):
        return SymMatrix(self.a + SymMatrix.of(other).a)

    def __sub__(self, other):
        return SymMatrix(self.a - SymMatrix.of(other).a)

    def __neg__(self):
        return SymMatrix(-self.a)

    def __mul__(self, t: float):
        return SymMatrix(self.a * float(t))

    __rmul__ = __mul__

    def allclose(self, other, tol=1e-12) -> bool:
        return bool(np.allclose(self.a, SymMatrix.of(other).a, atol=tol, rtol=0.0))

    def __repr__(self):
        return f"SymMatrix({self.a.tolist()})"


def pucci(sign, A, lam: float) -> float:
    """Extremal operator value at A with ellipticity lam.

    Parameters
    ----------
    sign : '+', '-', +1 or -1
        Which extremal operator.
    A : SymMatrix or array_like
        Symmetric argument.
    lam : float
        Ellipticity constant, must exceed 1.

    Returns
    -------
    float
        -tr(A+) + lam tr(A-) for '+', -lam tr(A+) + tr(A-) for '-'.
    """
    if lam <= 1.0:
        raise InvalidInputError("ellipticity must exceed 1")
    s = {"+": 1, "-": -1, 1: 1, -1: -1}.get(sign)
    if s is None:
        raise InvalidInputError(f"unknown sign {sign!r}")
    m = A.a if isinstance(A, SymMatrix) else np.asarray(A, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix entries must be finite")
    w, _ = sym_eig(m)
    tr_plus = float(np.maximum(w, 0.0).sum())
    tr_minus = float(np.maximum(-w, 0.0).sum())
    if s > 0:
        return -tr_plus + lam * tr_minus
    return -lam * tr_plus + tr_minus


# ---------------------------------------------------------------------------
# local operators
# ---------------------------------------------------------------------------

class LocalOperator:
    """Base class: a degenerate-elliptic map from symmetric matrices to reals."""

    ellipticity: float

    def value(self, A) -> float:
        raise NotImplementedError

    def f0(self) -> float:
        """Value at the zero matrix."""
        raise NotImplementedError

    def star(self) -> "LocalOperator":
        """The involution F -> -F(-.)."""
        raise NotImplementedError

    def translated(self, A0: SymMatrix) -> "LocalOperator":
        """The operator A -> F(A0 + A)."""
        raise NotImplementedError

    def shifted(self, s: float) -> "LocalOperator":
        """The operator F + s."""
        raise NotImplementedError

    def __call__(self, A) -> float:
        return self.value(A)


@dataclass(frozen=True)
class Linear(LocalOperator):
    """F(A) = -tr(a A) + c for a positive definite coefficient matrix a."""

    a: SymMatrix
    c: float = 0.0
    ellipticity: float = 0.0  # 0 means: derive from the spectrum of a

    def __post_init__(self):
        a = SymMatrix.of(self.a)
        object.__setattr__(self, "a", a)
        w, _ = a.eig()
        if w[0] <= 0:
            raise InvalidInputError("linear coefficient matrix must be positive definite")
        lam = self.ellipticity
        if lam == 0.0:
            lam = max(float(w[-1]), 1.0 + 1e-12)
        if w[0] < 1.0 - 1e-9 or w[-1] > lam + 1e-9:
            raise InvalidInputError(
                f"linear coefficient spectrum {w.tolist()} outside [1, {lam}]")
        object.__setattr__(self, "ellipticity", lam)

    def value(self, A) -> float:
        m = A.a if isinstance(A, SymMatrix) else np.asarray(A, dtype=float)
        return -float(np.tensordot(self.a.a, m)) + self.c

    def f0(self) -> float:
        return self.c

    def star(self) -> "Linear":
        return Linear(self.a, -self.c, self.ellipticity)

    def translated(self, A0: SymMatrix) -> "Linear":
        shift = -float(np.tensordot(self.a.a, SymMatrix.of(A0).a))
        return Linear(self.a, self.c + shift, self.ellipticity)

    def shifted(self, s: float) -> "Linear":
        return Linear(self.a, self.c + s, self.ellipticity)


@dataclass(frozen=True)
class Bellman(LocalOperator):
    """Minimum or maximum over a finite family of linear operators."""

    children: tuple
    mode: str = "min"
    ellipticity: float = field(init=False, default=0.0)

    def __post_init__(self):
        if not self.children:
            raise InvalidInputError("Bellman operator needs at least one child")
        if self.mode not in ("min", "max"):
            raise InvalidInputError(f"Bellman mode must be 'min' or 'max', got {self.mode!r}")
        object.__setattr__(self, "children", tuple(self.children))
        object.__setattr__(
            self, "ellipticity", max(ch.ellipticity for ch in self.children))

    def value(self, A) -> float:
        vals = [ch.value(A) for ch in self.children]
        return min(vals) if self.mode == "min" else max(vals)

    def f0(self) -> float:
        vals = [ch.f0() for ch in self.children]
        return min(vals) if self.mode == "min" else max(vals)

    def star(self) -> "Bellman":
        mode = "max" if self.mode == "min" else "min"
        return Bellman(tuple(ch.star() for ch in self.children), mode)

    def translated(self, A0: SymMatrix) -> "Bellman":
        return Bellman(tuple(ch.translated(A0) for ch in self.children), self.mode)

    def shifted(self, s: float) -> "Bellman":
        return Bellman(tuple(ch.shifted(s) for ch in self.children), self.mode)


@dataclass(frozen=True)
class PucciShift(LocalOperator):
    """An extremal operator plus a constant."""

    sign: int
    lam: float
    c: float = 0.0

    def __post_init__(self):
        s = {"+": 1, "-": -1, 1: 1, -1: -1}.get(self.sign)
        if s is None:
            raise InvalidInputError(f"unknown sign {self.sign!r}")
        object.__setattr__(self, "sign", s)
        if self.lam <= 1.0:
            raise InvalidInputError("ellipticity must exceed 1")

    @property
    def ellipticity(self) -> float:
        return self.lam

    def value(self, A) -> float:
        return pucci(self.sign, A, self.lam) + self.c

    def f0(self) -> float:
        return self.c

    def star(self) -> "PucciShift":
        return PucciShift(-self.sign, self.lam, -self.c)

    def translated(self, A0: SymMatrix) -> "LocalOperator":
        A0 = SymMatrix.of(A0)
        if np.allclose(A0.a, 0.0):
            return self
        return TranslatedOperator(self, A0)

    def shifted(self, s: float) -> "PucciShift":
        return PucciShift(self.sign, self.lam, self.c + s)


@dataclass(frozen=True)
class TranslatedOperator(LocalOperator):
    """Fallback wrapper for operators with no closed form under translation.

    Evaluable, but not decomposable by the finite-difference stencil.
    """

    base: LocalOperator
    offset: SymMatrix
    extra: float = 0.0

    @property
    def ellipticity(self) -> float:
        return self.base.ellipticity

    def value(self, A) -> float:
        return self.base.value(self.offset + SymMatrix.of(A)) + self.extra

    def f0(self) -> float:
        return self.base.value(self.offset) + self.extra

    def star(self) -> "LocalOperator":
        return TranslatedOperator(self.base.star(), -self.offset, -self.extra)

    def translated(self, A0: SymMatrix) -> "LocalOperator":
        return TranslatedOperator(self.base, self.offset + SymMatrix.of(A0), self.extra)

    def shifted(self, s: float) -> "LocalOperator":
        return TranslatedOperator(self.base, self.offset, self.extra + s)


# ---------------------------------------------------------------------------
# tile maps and operator fields
# ---------------------------------------------------------------------------

class TileMap(Protocol):
    """Lookup from integer lattice cells to local operators."""

    d: int
    ellipticity: float

    def tile(self, cell) -> LocalOperator: ...

    def contains(self, cell) -> bool: ...


@dataclass(frozen=True)
class ConstantMap:
    """A single operator on every cell of the lattice."""

    op: LocalOperator
    d: int = 2

    @property
    def ellipticity(self) -> float:
        return self.op.ellipticity

    def tile(self, cell) -> LocalOperator:
        return self.op

    def contains(self, cell) -> bool:
        return True


def cell_of(x) -> tuple:
    """Integer lattice cell containing x (componentwise floor)."""
    x = np.asarray(x, dtype=float)
    return tuple(int(v) for v in np.floor(x))


@dataclass(frozen=True)
class OperatorField:
    """A tile map composed with the lazy transform chain.

    Evaluation follows  eval(A, x) = sigma * base(sigma * (A0 + A), cell(x)) + s
    with sigma = -1 exactly when the field is starred.
    """

    base: TileMap
    translate_by: SymMatrix = None
    shift_by: float = 0.0
    starred: bool = False

    def __post_init__(self):
        if self.translate_by is None:
            object.__setattr__(self, "translate_by", SymMatrix.zero(self.base.d))

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def ellipticity(self) -> float:
        return self.base.ellipticity

    def value(self, A, x) -> float:
        cell = cell_of(x)
        if not self.base.contains(cell):
            raise OutOfWindowError(f"cell {cell} outside field window")
        sigma = -1.0 if self.starred else 1.0
        M = self.translate_by + SymMatrix.of(A)
        return sigma * self.base.tile(cell).value(sigma * M) + self.shift_by

    def effective_tile(self, cell) -> LocalOperator:
        """Resolve the transform chain into a plain local operator for one cell."""
        if not self.base.contains(cell):
            raise OutOfWindowError(f"cell {cell} outside field window")
        op = self.base.tile(cell)
        if self.starred:
            op = op.star()
        if not np.allclose(self.translate_by.a, 0.0):
            op = op.translated(self.translate_by)
        if self.shift_by != 0.0:
            op = op.shifted(self.shift_by)
        return op

    def star(self) -> "OperatorField":
        return OperatorField(self.base, -self.translate_by, -self.shift_by,
                             not self.starred)

    def translate(self, A0) -> "OperatorField":
        return OperatorField(self.base, self.translate_by + SymMatrix.of(A0),
                             self.shift_by, self.starred)

    def shift(self, s: float) -> "OperatorField":
        return OperatorField(self.base, self.translate_by, self.shift_by + float(s),
                             self.starred)


def constant_field(op: LocalOperator, d: int = 2) -> OperatorField:
    return OperatorField(ConstantMap(op, d))


def star(f: OperatorField) -> OperatorField:
    return f.star()


def translate(f: OperatorField, A0) -> OperatorField:
    return f.translate(A0)


def shift(f: OperatorField, s: float) -> OperatorField:
    return f.shift(s)


# ---------------------------------------------------------------------------
# ellipticity verification
# ---------------------------------------------------------------------------

@dataclass
class EllipticityReport:
    max_violation: float
    n_samples: int
    worst: dict


def _random_sym(rng, d, scale=1.0):
    m = rng.normal(size=(d, d)) * scale
    return SymMatrix(0.5 * (m + m.T))


def ellipticity_report(f: OperatorField, n_samples: int, seed: int = 0,
                       cells=None) -> EllipticityReport:
    """Sampled check of the two-sided extremal-operator sandwich.

    Draws matrix pairs (A, B) and cells, and measures by how much
    F(A,x) - F(B,x) escapes the interval bounded by the extremal operators
    applied to A - B.  Zero for every in-contract field.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    d = f.d
    lam = f.ellipticity
    if cells is None:
        cells = [tuple([0] * d)]
    worst = {"violation": 0.0}
    for k in range(n_samples):
        A = _random_sym(rng, d, scale=2.0)
        B = _random_sym(rng, d, scale=2.0)
        cell = cells[int(rng.integers(len(cells)))]
        x = np.asarray(cell, dtype=float) + 0.5
        diff = f.value(A, x) - f.value(B, x)
        lo = pucci("-", A - B, lam)
        hi = pucci("+", A - B, lam)
        v = max(lo - diff, diff - hi, 0.0)
        if v > worst["violation"]:
            worst = {"violation": v, "A": A, "B": B, "cell": cell}
    return EllipticityReport(worst["violation"], n_samples, worst)
