"""Random tile environments on the integer lattice.

Cells are drawn i.i.d. from a finite tile ensemble through a counter-based
generator keyed by (seed, realization index, cell coordinates), so any
sub-window of a realization regenerates identically without materializing the
rest.  Independence at lattice distance >= 1 and invariance in law under
integer translations hold by construction.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import solver
from .grid import Box
from .operators import (Bellman, ConstantMap, Linear, LocalOperator,
                        OperatorField, constant_field, ellipticity_report)


class RealizationFormatError(ValueError):
    """Raised for malformed realization files."""


class EnsembleError(ValueError):
    """Raised when a tile ensemble violates its contract."""


# ---------------------------------------------------------------------------
# counter-based generator (splitmix-style finalizer, vectorized)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def lattice_uniforms(seed: int, index: int, coords: np.ndarray) -> np.ndarray:
    """Deterministic uniforms in [0, 1), one per integer lattice point.

    coords: integer array of shape (N, d).  The value at a point depends only
    on (seed, index, point), never on the enclosing window.
    """
    coords = np.asarray(coords, dtype=np.int64)
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        h = _mix64(h ^ (np.uint64(index & 0xFFFFFFFFFFFFFFFF) + _GOLDEN))
        acc = np.full(coords.shape[0], h, dtype=np.uint64)
        for k in range(coords.shape[1]):
            ck = coords[:, k].view(np.uint64) if coords[:, k].dtype == np.uint64 \
                else coords[:, k].astype(np.int64).view(np.uint64)
            acc = _mix64(acc ^ (ck + np.uint64(k + 1) * _GOLDEN))
    return (acc >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileEnsemble:
    """A finite family of local operators with sampling probabilities."""

    tiles: tuple
    probs: np.ndarray
    lam: float
    k0: float
    d: int = 2

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        p = np.asarray(self.probs, dtype=float)
        if len(p) != len(self.tiles) or len(p) == 0:
            raise EnsembleError("probs: need one probability per tile")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise EnsembleError(f"probs: must be nonnegative and sum to 1, got {p.tolist()}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)
        for i, t in enumerate(self.tiles):
            if abs(t.f0()) > self.k0 + 1e-12:
                raise EnsembleError(
                    f"tile {i}: |F(0)| = {abs(t.f0())} exceeds the uniform bound {self.k0}")
            if t.ellipticity > self.lam + 1e-9:
                raise EnsembleError(
                    f"tile {i}: ellipticity {t.ellipticity} exceeds ensemble bound {self.lam}")
            rep = ellipticity_report(constant_field(t, self.d), 64, seed=7 * i + 1)
            if rep.max_violation > 1e-9:
                raise EnsembleError(
                    f"tile {i}: ellipticity sandwich violated by {rep.max_violation:.2e}")
            try:
                solver.assert_decomposable(t, where=f"tile {i}")
            except solver.StencilError as exc:
                raise EnsembleError(str(exc)) from None

    @property
    def cumprobs(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def deterministic(self) -> bool:
        return len(self.tiles) == 1 or bool(np.any(self.probs == 1.0))


def scalar_tile(value: float, c: float = 0.0, d: int = 2,
                lam: float = 0.0) -> Linear:
    from .operators import SymMatrix
    return Linear(SymMatrix(np.eye(d) * float(value)), c,
                  lam if lam else max(float(value), 1.0 + 1e-12))


def checkerboard(values=(1.0, 4.0), c: float = 0.0, p: float | None = 0.5,
                 d: int = 2) -> TileEnsemble:
    """The default experiment ensemble: scalar tiles drawn i.i.d. per unit cell.

    p is the probability of the first of two tiles; None gives equal weights.
    """
    lam = max(max(values), 1.0 + 1e-12)
    tiles = tuple(scalar_tile(v, c, d, lam) for v in values)
    if p is None:
        probs = (1.0 / len(tiles),) * len(tiles)
    else:
        if len(tiles) != 2:
            raise EnsembleError("probs: explicit p applies to two tiles only")
        probs = (p, 1.0 - p)
    return TileEnsemble(tiles, probs, lam, abs(c), d)


def bellman_checkerboard(values=(1.0, 4.0), c: float = 0.0,
                         d: int = 2) -> TileEnsemble:
    """Nonlinear default: a single deterministic min-type Bellman tile."""
    lam = max(max(values), 1.0 + 1e-12)
    children = tuple(scalar_tile(v, c, d, lam) for v in values)
    return TileEnsemble((Bellman(children, "min"),), (1.0,), lam, abs(c), d)


def constant_ensemble(op: LocalOperator, d: int = 2) -> TileEnsemble:
    return TileEnsemble((op,), (1.0,), max(op.ellipticity, 1.0 + 1e-12),
                        abs(op.f0()), d)


# ---------------------------------------------------------------------------
# realizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Realization:
    """A seeded assignment of ensemble tiles to a window of integer cells."""

    ensemble: TileEnsemble
    lo: tuple
    cells: np.ndarray
    seed: int
    index: int

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        c = np.asarray(self.cells, dtype=np.int16)
        c.flags.writeable = False
        object.__setattr__(self, "cells", c)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return self.cells.shape

    def contains(self, cell) -> bool:
        return all(lo <= c < lo + s
                   for lo, c, s in zip(self.lo, cell, self.shape))

    def tile_index(self, cell) -> int:
        if not self.contains(cell):
            raise KeyError(f"cell {cell} outside realization window")
        idx = tuple(int(c - lo) for c, lo in zip(cell, self.lo))
        return int(self.cells[idx])

    def tile(self, cell) -> LocalOperator:
        return self.ensemble.tiles[self.tile_index(cell)]

    def translated(self, z) -> "Realization":
        """The same cells viewed from a window shifted by an integer vector."""
        z = tuple(int(v) for v in z)
        return Realization(self.ensemble, tuple(l + zi for l, zi in zip(self.lo, z)),
                           self.cells, self.seed, self.index)


def window_for(box: Box, pad: int = 0):
    """Integer window (lo, shape) covering all cells a box touches."""
    lo = tuple(int(np.floor(v)) - pad for v in box.lo)
    hi = tuple(int(np.ceil(v)) + pad for v in box.hi)
    shape = tuple(max(h - l, 1) for l, h in zip(lo, hi))
    return lo, shape


def sample_realization(ensemble: TileEnsemble, window, seed: int,
                       index: int = 0) -> Realization:
    """Draw one realization on a window = (lo, shape) of integer cells.

    Cells are independent across lattice points and reproduce exactly for the
    same (seed, index) regardless of the window.
    """
    lo, shape = window
    lo = tuple(int(v) for v in lo)
    shape = tuple(int(v) for v in shape)
    if any(s < 1 for s in shape):
        raise ValueError("window must be nonempty")
    axes = [np.arange(l, l + s, dtype=np.int64) for l, s in zip(lo, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.column_stack([m.ravel() for m in mesh])
    u = lattice_uniforms(seed, index, coords)
    idx = np.searchsorted(ensemble.cumprobs, u, side="right")
    idx = np.minimum(idx, len(ensemble.tiles) - 1).astype(np.int16)
    return Realization(ensemble, lo, idx.reshape(shape), seed, index)


@dataclass(frozen=True)
class RealizationMap:
    """Tile lookup backed by a realization window."""

    realization: Realization

    @property
    def d(self) -> int:
        return self.realization.d

    @property
    def ellipticity(self) -> float:
        return self.realization.ensemble.lam

    def tile(self, cell) -> LocalOperator:
        return self.realization.tile(cell)

    def contains(self, cell) -> bool:
        return self.realization.contains(cell)


def field_of(realization: Realization) -> OperatorField:
    """Piecewise-constant operator field: the tile at x is cells(floor(x))."""
    return OperatorField(RealizationMap(realization))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_REAL_MAGIC = "HOMOGLAB-REAL v1"


def save_realization(r: Realization, path) -> None:
    lines = [_REAL_MAGIC]
    lo = " ".join(str(v) for v in r.lo)
    shape = " ".join(str(v) for v in r.shape)
    lines.append(f"{r.d} {r.seed} {r.index} {lo} {shape}")
    flat = r.cells.reshape(r.shape[0], -1)
    for row in flat:
        lines.append(" ".join(str(int(v)) for v in row))
    payload = ("\n".join(lines) + "\n").encode()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(f"CRC32 {crc:08x}\n".encode())


def load_realization(path, ensemble: TileEnsemble) -> Realization:
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode()
    lines = text.splitlines()
    if not lines or lines[0] != _REAL_MAGIC:
        raise RealizationFormatError(f"{path}: missing magic line {_REAL_MAGIC!r}")
    if not lines[-1].startswith("CRC32 "):
        raise RealizationFormatError(f"{path}: missing CRC32 trailer")
    payload = text[: text.rindex("CRC32 ")].encode()
    want = lines[-1].split()[1]
    got = zlib.crc32(payload) & 0xFFFFFFFF
    if f"{got:08x}" != want:
        raise RealizationFormatError(
            f"{path}: checksum mismatch (file says {want}, content is {got:08x})")
    header = lines[1].split()
    try:
        d = int(header[0])
        seed = int(header[1])
        index = int(header[2])
        lo = tuple(int(v) for v in header[3:3 + d])
        shape = tuple(int(v) for v in header[3 + d:3 + 2 * d])
    except (IndexError, ValueError) as exc:
        raise RealizationFormatError(f"{path}: malformed header line") from exc
    body = []
    for ln in lines[2:-1]:
        body.extend(int(v) for v in ln.split())
    expected = int(np.prod(shape))
    if len(body) != expected:
        raise RealizationFormatError(
            f"{path}: expected {expected} tile indices, found {len(body)}")
    cells = np.asarray(body, dtype=np.int16).reshape(shape)
    if cells.size and (cells.min() < 0 or cells.max() >= len(ensemble.tiles)):
        raise RealizationFormatError(f"{path}: tile index out of range")
    return Realization(ensemble, lo, cells, seed, index)
