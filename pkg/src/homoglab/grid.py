"""Triadic cube bookkeeping and uniform grid functions over cubes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class MisalignedGridError(ValueError):
    """Raised when a restriction target does not align with the grid."""


class GridFormatError(ValueError):
    """Raised for malformed grid-function files."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned cube: lo + [0, side]^d."""

    lo: tuple
    side: float

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        if not (self.side > 0) or not np.isfinite(self.side):
            raise ValueError("box side must be positive and finite")

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def hi(self) -> tuple:
        return tuple(v + self.side for v in self.lo)

    @property
    def center(self) -> tuple:
        return tuple(v + 0.5 * self.side for v in self.lo)

    def volume(self) -> float:
        return self.side ** self.d

    def contains_open(self, x) -> bool:
        return all(lo < xi < hi for lo, xi, hi in zip(self.lo, x, self.hi))


@dataclass(frozen=True)
class TriadicCube:
    """The cube 3^m k + (-3^m/2, 3^m/2)^d at level m with index k."""

    m: int
    k: tuple

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in self.k))

    @property
    def d(self) -> int:
        return len(self.k)

    @property
    def side(self) -> float:
        return 3.0 ** self.m

    @property
    def center(self) -> tuple:
        return tuple(self.side * ki for ki in self.k)

    def box(self) -> Box:
        return Box(tuple(c - 0.5 * self.side for c in self.center), self.side)

    def contains(self, x) -> bool:
        # half-open convention per axis: [lo, hi)
        b = self.box()
        return all(lo <= xi < hi for lo, xi, hi in zip(b.lo, x, b.hi))


def cube_of(m: int, x) -> TriadicCube:
    """The unique level-m triadic cube containing x.

    Points on the shared face of two cubes are resolved toward +infinity
    (half-open convention per axis).
    """
    x = np.asarray(x, dtype=float)
    k = np.floor(3.0 ** (-m) * x + 0.5).astype(int)
    return TriadicCube(m, tuple(int(v) for v in k))


def subcubes(cube: TriadicCube, levels: int = 1) -> list:
    """All 3^(d*levels) descendants of a cube, `levels` levels down."""
    if levels < 1:
        raise ValueError("levels must be at least 1")
    step = 3 ** levels
    half = (step - 1) // 2
    offs = range(-half, half + 1)
    out = []
    for j in itertools.product(offs, repeat=cube.d):
        kk = tuple(step * ki + ji for ki, ji in zip(cube.k, j))
        out.append(TriadicCube(cube.m - levels, kk))
    return out


def as_box(region) -> Box:
    if isinstance(region, Box):
        return region
    if isinstance(region, TriadicCube):
        return region.box()
    raise TypeError(f"expected Box or TriadicCube, got {type(region).__name__}")


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Scalar values on a uniform n^d node grid over a cube (endpoints included)."""

    box: Box
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != self.box.d:
            raise ValueError(f"values must be {self.box.d}-dimensional")
        n = v.shape[0]
        if any(s != n for s in v.shape) or n < 2:
            raise ValueError("values must be a square array with at least 2 nodes per side")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> float:
        return self.box.side / (self.n - 1)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.box.lo[axis] + self.h * np.arange(self.n)

    def node_points(self) -> np.ndarray:
        """All node positions, shape (n^d, d), row-major."""
        axes = [self.axis_coords(k) for k in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros(self.values.shape, dtype=bool)
        for axis in range(self.d):
            sl = [slice(None)] * self.d
            sl[axis] = 0
            m[tuple(sl)] = True
            sl[axis] = -1
            m[tuple(sl)] = True
        return m

    @classmethod
    def from_callable(cls, box: Box, n: int, fn) -> "GridFunction":
        axes = [box.lo[k] + (box.side / (n - 1)) * np.arange(n) for k in range(box.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(box, np.asarray(fn(*mesh), dtype=float))

    @classmethod
    def constant(cls, box: Box, n: int, value: float = 0.0) -> "GridFunction":
        return cls(box, np.full((n,) * box.d, float(value)))

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.box, values)


def restrict(u: GridFunction, child) -> GridFunction:
    """Restrict a grid function to an aligned subcube, sharing nodes exactly."""
    cbox = as_box(child)
    if (u.n - 1) % 3 != 0:
        raise MisalignedGridError("parent resolution n-1 must be divisible by 3")
    h = u.h
    offs = []
    for axis in range(u.d):
        t = (cbox.lo[axis] - u.box.lo[axis]) / h
        ti = round(t)
        if abs(t - ti) > 1e-9:
            raise MisalignedGridError(f"child origin misaligned on axis {axis}")
        offs.append(int(ti))
    steps = cbox.side / h
    n_child = round(steps)
    if abs(steps - n_child) > 1e-9:
        raise MisalignedGridError("child side is not a whole number of grid steps")
    n_child += 1
    sl = tuple(slice(o, o + n_child) for o in offs)
    if any(o < 0 or o + n_child > u.n for o in offs):
        raise MisalignedGridError("child box extends outside the parent grid")
    return GridFunction(cbox, u.values[sl])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_GRID_MAGIC = "HOMOGLAB-GRID v1"


def save_gridfunction(u: GridFunction, path) -> None:
    lines = [_GRID_MAGIC]
    lo = " ".join(repr(float(v)) for v in u.box.lo)
    lines.append(f"{u.d} {u.n} {lo} {float(u.box.side)!r}")
    lines.extend(repr(float(v)) for v in u.values.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gridfunction(path) -> GridFunction:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _GRID_MAGIC:
        raise GridFormatError(f"{path}: missing magic line {_GRID_MAGIC!r}")
    header = lines[1].split()
    try:
        d = int(header[0])
        n = int(header[1])
        lo = tuple(float(v) for v in header[2:2 + d])
        side = float(header[2 + d])
    except (IndexError, ValueError) as exc:
        raise GridFormatError(f"{path}: malformed header line") from exc
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != n ** d:
        raise GridFormatError(f"{path}: expected {n ** d} values, found {len(body)}")
    vals = np.array([float(v) for v in body]).reshape((n,) * d)
    return GridFunction(Box(lo, side), vals)
