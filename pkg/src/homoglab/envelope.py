"""Convex envelopes of grid functions and their subdifferential measure.

The envelope is the lower convex hull of the lifted nodes (x_i, u_i).  Each
hull vertex strictly inside a region carries an atom: the convex hull of the
gradients of its incident lower facets.  Summing atom volumes gives the
Lebesgue measure of the subdifferential image of the region; facet interiors
and edges contribute null sets only.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .grid import Box, GridFunction, as_box


class SlopeBoxError(ValueError):
    """The sampling box for the Monte Carlo oracle misses a facet gradient."""


def _hull_area_2d(points) -> float:
    """Area of the convex hull of a small 2-d point list (monotone chain)."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) < 3:
        return 0.0

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                    (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                    - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    poly = lower[:-1] + upper[:-1]
    if len(poly) < 3:
        return 0.0
    area = 0.0
    for (x0, y0), (x1, y1) in zip(poly, poly[1:] + poly[:1]):
        area += x0 * y1 - x1 * y0
    return 0.5 * abs(area)


def _hull_points_2d(points) -> np.ndarray:
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=float)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                    (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1])
                    - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1], dtype=float)


def _polytope_volume(points, d: int) -> float:
    if d == 2:
        return _hull_area_2d(points)
    pts = np.asarray(points, dtype=float)
    if len(pts) <= d:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0  # degenerate (lower-dimensional) atom


@dataclass(eq=False)
class EnvelopeResult:
    """Lower hull of a lifted grid function, with per-vertex gradient atoms."""

    grid: GridFunction
    mask: np.ndarray | None
    points: np.ndarray          # (N, d) positions of the participating nodes
    heights: np.ndarray         # (N,) their values
    node_ids: np.ndarray        # (N,) flat index into the full grid
    facet_gradients: np.ndarray  # (F, d), coplanar facets merged
    facet_offsets: np.ndarray   # (F,) plane value at the origin
    facet_nodes: list           # per merged facet, participating node rows
    vertex_rows: np.ndarray     # rows (into points) that are hull vertices
    atom_gradients: list        # per vertex row, incident raw facet gradients
    atom_volumes: np.ndarray    # per vertex row
    degenerate: bool = False
    _values: np.ndarray | None = dfield(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.grid.d

    def envelope_values(self) -> GridFunction:
        """Envelope heights at every grid node (max over facet planes), lazy."""
        if self._values is None:
            pts = self.grid.node_points()
            best = np.full(len(pts), -np.inf)
            chunk = max(1, int(4e6 // max(len(pts), 1)))
            G, b = self.facet_gradients, self.facet_offsets
            for k in range(0, len(G), chunk):
                planes = pts @ G[k:k + chunk].T + b[k:k + chunk]
                np.maximum(best, planes.max(axis=1), out=best)
            self._values = best.reshape(self.grid.values.shape)
        return GridFunction(self.grid.box, self._values)

    def contact_mask(self, tol: float | None = None) -> np.ndarray:
        """Nodes where the function touches its envelope (within tolerance)."""
        if tol is None:
            tol = max(1e-10, self.grid.h ** 2)
        gap = self.grid.values - self.envelope_values().values
        mask = gap <= tol
        if self.mask is not None:
            mask &= self.mask
        return mask

    def measure(self, region=None) -> float:
        """Subdifferential measure of the open region (defaults to the cube)."""
        box = as_box(region) if region is not None else self.grid.box
        if self.degenerate or len(self.vertex_rows) == 0:
            return 0.0
        pos = self.points[self.vertex_rows]
        lo = np.asarray(box.lo)
        hi = np.asarray(box.hi)
        inside = np.all((pos > lo) & (pos < hi), axis=1)
        return float(self.atom_volumes[inside].sum())


def convex_envelope(u: GridFunction, mask: np.ndarray | None = None,
                    merge_tol: float = 1e-10,
                    extra_points=None) -> EnvelopeResult:
    """Lower convex hull of the lifted nodes of u.

    Parameters
    ----------
    u : GridFunction
    mask : optional boolean array over the grid; only masked-in nodes
        participate (envelope with respect to a sub-domain).
    merge_tol : gradients closer than this are treated as one facet.
    extra_points : optional (positions, values) constraining the hull from
        below without being measured; used to resolve a curved sub-domain
        boundary that the grid undersamples.  Atoms are only attributed to
        grid nodes.
    """
    pts_all = u.node_points()
    vals_all = u.values.ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape != vals_all.shape:
            raise ValueError("mask shape does not match the grid")
        node_ids = np.flatnonzero(m)
    else:
        node_ids = np.arange(len(vals_all))
    pts = pts_all[node_ids]
    vals = vals_all[node_ids]
    if extra_points is not None:
        xp, xv = extra_points
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        xv = np.asarray(xv, dtype=float).ravel()
        pts = np.vstack([pts, xp])
        vals = np.concatenate([vals, xv])
        node_ids = np.concatenate([node_ids, np.full(len(xv), -1, dtype=node_ids.dtype)])
    d = u.d

    # affine data has a flat lift; qhull rejects it, and the measure is zero
    A = np.column_stack([pts, np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    resid = np.abs(A @ coef - vals).max() if len(pts) else 0.0
    scale = max(1.0, np.abs(vals).max() if len(vals) else 1.0)
    if resid <= 1e-12 * scale:
        return EnvelopeResult(
            grid=u, mask=mask, points=pts, heights=vals, node_ids=node_ids,
            facet_gradients=coef[:d][None, :], facet_offsets=np.array([coef[d]]),
            facet_nodes=[list(range(len(pts)))],
            vertex_rows=np.array([], dtype=int),
            atom_gradients=[], atom_volumes=np.array([]), degenerate=True)

    lifted = np.column_stack([pts, vals])
    try:
        hull = ConvexHull(lifted)
    except QhullError:
        hull = ConvexHull(lifted, qhull_options="QJ")

    eq = hull.equations
    lower = np.flatnonzero(eq[:, d] < -1e-12)
    nz = eq[lower, d]
    grads = -eq[lower, :d] / nz[:, None]
    offsets = -eq[lower, d + 1] / nz

    # vertex -> incident lower facets (atoms only at genuine grid nodes)
    simplices = hull.simplices[lower]
    incident: dict[int, list[int]] = {}
    for fi, simplex in enumerate(simplices):
        for v in simplex:
            if node_ids[int(v)] >= 0:
                incident.setdefault(int(v), []).append(fi)

    vertex_rows = np.fromiter(sorted(incident), dtype=int, count=len(incident))
    atom_gradients = []
    atom_volumes = np.empty(len(vertex_rows))
    glist = grads.tolist()
    for i, v in enumerate(vertex_rows):
        gs = [glist[fi] for fi in incident[int(v)]]
        atom_gradients.append(np.asarray(gs))
        atom_volumes[i] = _polytope_volume(gs, d) if len(gs) > d else 0.0

    # merge coplanar facets by gradient equality
    keys = np.round(grads / merge_tol).astype(np.int64)
    _, group, inverse = np.unique(keys, axis=0, return_index=True,
                                  return_inverse=True)
    merged_g = np.zeros((len(group), d))
    merged_b = np.zeros(len(group))
    merged_nodes: list[set] = [set() for _ in group]
    counts = np.zeros(len(group))
    for fi, gi in enumerate(inverse):
        merged_g[gi] += grads[fi]
        merged_b[gi] += offsets[fi]
        counts[gi] += 1
        merged_nodes[gi].update(int(v) for v in simplices[fi])
    merged_g /= counts[:, None]
    merged_b /= counts

    return EnvelopeResult(
        grid=u, mask=mask, points=pts, heights=vals, node_ids=node_ids,
        facet_gradients=merged_g, facet_offsets=merged_b,
        facet_nodes=[sorted(s) for s in merged_nodes],
        vertex_rows=vertex_rows, atom_gradients=atom_gradients,
        atom_volumes=atom_volumes)


def subdiff_measure(u, region=None, mask: np.ndarray | None = None) -> float:
    """Measure of the subdifferential image of the open region under the envelope."""
    env = u if isinstance(u, EnvelopeResult) else convex_envelope(u, mask=mask)
    return env.measure(region)


@dataclass
class SubdiffPolytope:
    """Subdifferential at one node: extreme slopes plus a support certificate."""

    node: tuple
    points: np.ndarray
    volume: float
    support_violation: float


def subdiff_at(u, node, mask: np.ndarray | None = None) -> SubdiffPolytope:
    """Subdifferential polytope at a grid node (empty off the hull vertices).

    The support certificate reports the worst violation of
    u(y) >= env(node) + p . (y - node) over all nodes y and extreme points p.
    """
    env = u if isinstance(u, EnvelopeResult) else convex_envelope(u, mask=mask)
    node = np.asarray(node, dtype=float)
    if node.shape == (env.d,):
        target = node
    else:
        idx = tuple(int(v) for v in np.atleast_1d(node))
        target = env.grid.node_points()[np.ravel_multi_index(idx, env.grid.values.shape)]
    dists = np.abs(env.points - target).max(axis=1)
    row = int(np.argmin(dists))
    if dists[row] > 1e-9 * max(1.0, env.grid.box.side):
        raise KeyError(f"no grid node at {target.tolist()}")
    if env.degenerate:
        # affine data: one global facet, every node supports its slope
        p = env.facet_gradients[0]
        viol = float(np.max(env.heights[row] + (env.points - target) @ p
                            - env.heights))
        return SubdiffPolytope(tuple(target), env.facet_gradients[:1].copy(),
                               0.0, max(viol, 0.0))
    where = np.searchsorted(env.vertex_rows, row)
    if where >= len(env.vertex_rows) or env.vertex_rows[where] != row:
        return SubdiffPolytope(tuple(target), np.empty((0, env.d)), 0.0, 0.0)
    gs = env.atom_gradients[where]
    extremes = _hull_points_2d(gs) if env.d == 2 else np.unique(gs, axis=0)
    base = float(env.heights[row])
    worst = 0.0
    diffs = env.points - target
    for p in np.atleast_2d(extremes):
        viol = float(np.max(base + diffs @ p - env.heights))
        worst = max(worst, viol)
    return SubdiffPolytope(tuple(target), np.atleast_2d(extremes),
                           float(env.atom_volumes[where]), worst)


def support_certificate(u, x0, p, mask: np.ndarray | None = None) -> float:
    """Worst violation of  env(y) >= env(x0) + p . (y - x0)  over all nodes.

    Nonpositive (up to round-off) exactly when p is a subgradient of the
    envelope at x0.  Works at any node, including facet-interior contact
    nodes that carry no vertex atom.
    """
    env = u if isinstance(u, EnvelopeResult) else convex_envelope(u, mask=mask)
    x0 = np.asarray(x0, dtype=float)
    p = np.asarray(p, dtype=float)
    keep = env.node_ids >= 0
    pts = env.points[keep]
    vals = env.envelope_values().values.ravel()[env.node_ids[keep]]
    dists = np.abs(pts - x0).max(axis=1)
    row = int(np.argmin(dists))
    if dists[row] > 1e-9 * max(1.0, env.grid.box.side):
        raise KeyError(f"no grid node at {x0.tolist()}")
    base = vals[row]
    planes = base + (pts - x0) @ p
    return float(np.max(planes - vals))


@dataclass
class MCMeasure:
    """Monte Carlo estimate of a subdifferential measure."""

    value: float
    stderr: float
    n_slopes: int
    hits: int

    def __float__(self):
        return self.value


def _clip_polygon_to_box(poly: np.ndarray, lo, hi) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against an axis box."""
    pts = list(map(tuple, poly))
    for axis in range(len(lo)):
        for sign, bound in ((1, lo[axis]), (-1, -hi[axis])):
            out = []
            if not pts:
                return np.empty((0, len(lo)))
            for a, b in zip(pts, pts[1:] + pts[:1]):
                da = sign * a[axis] - bound
                db = sign * b[axis] - bound
                if da >= 0:
                    out.append(a)
                if (da >= 0) != (db >= 0):
                    t = da / (da - db)
                    out.append(tuple(np.asarray(a) + t * (np.asarray(b) - np.asarray(a))))
            pts = out
    return np.asarray(pts) if pts else np.empty((0, len(lo)))


def mc_subdiff_measure(u: GridFunction, region=None, n_slopes: int = 4000,
                       slope_box=None, seed: int = 0,
                       mask: np.ndarray | None = None) -> MCMeasure:
    """Independent Monte Carlo estimate of the subdifferential measure.

    Samples slopes p uniformly in slope_box and counts those whose supporting
    plane of the envelope (offset min(u - p.x)) touches inside the open
    region.  Unbiased for |slope_box| * P(touch inside region).

    slope_box: (lo, hi) arrays; must contain every facet gradient (validated
    against the hull; raises SlopeBoxError otherwise).  Defaults to the hull
    gradient bounding box padded by 5%.
    """
    box = as_box(region) if region is not None else u.box
    env = convex_envelope(u, mask=mask)
    if len(env.facet_gradients):
        gmin = env.facet_gradients.min(axis=0)
        gmax = env.facet_gradients.max(axis=0)
    else:
        gmin = gmax = np.zeros(u.d)
    if slope_box is None:
        pad = 0.05 * np.maximum(gmax - gmin, 1e-9)
        slope_box = (gmin - pad, gmax + pad)
    lo = np.asarray(slope_box[0], dtype=float)
    hi = np.asarray(slope_box[1], dtype=float)
    if np.any(gmin < lo - 1e-12) or np.any(gmax > hi + 1e-12):
        raise SlopeBoxError(
            f"slope box [{lo.tolist()}, {hi.tolist()}] misses facet gradients "
            f"in [{gmin.tolist()}, {gmax.tolist()}]")

    rng = np.random.default_rng(seed)
    slopes = rng.uniform(lo, hi, size=(n_slopes, u.d))
    pts, vals = env.points, env.heights
    blo, bhi = np.asarray(box.lo), np.asarray(box.hi)
    hits = 0
    chunk = max(1, int(4e6 // max(len(pts), 1)))
    for k0 in range(0, n_slopes, chunk):
        P = slopes[k0:k0 + chunk]
        V = vals[None, :] - P @ pts.T
        mins = V.min(axis=1)
        near = V <= mins[:, None] + 1e-12 * np.maximum(1.0, np.abs(mins))[:, None]
        for r in range(len(P)):
            touch = pts[near[r]]
            strict = np.all((touch > blo) & (touch < bhi), axis=1)
            if np.any(strict):
                hits += 1
            elif len(touch) > 1 and u.d == 2:
                poly = _hull_points_2d(touch)
                clipped = _clip_polygon_to_box(np.atleast_2d(poly), blo, bhi)
                if len(clipped) and np.any(
                        np.all((clipped > blo + 1e-12) & (clipped < bhi - 1e-12),
                               axis=1)):
                    hits += 1
    vol = float(np.prod(hi - lo))
    q = hits / n_slopes
    return MCMeasure(vol * q, vol * np.sqrt(max(q * (1 - q), 0.0) / n_slopes),
                     n_slopes, hits)
