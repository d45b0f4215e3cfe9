"""Analytic reference surfaces used by the self-test and acceptance suites."""

from __future__ import annotations

import numpy as np


def paraboloid(t: float = 1.0):
    """x -> t/2 |x|^2; gradient image of the unit cube has volume t^d."""
    def u(*coords):
        return 0.5 * t * sum(np.asarray(c) ** 2 for c in coords)
    return u


def unit_det_quadratic(r: float, d: int = 2):
    """Anisotropic convex quadratic with unit Hessian determinant.

    In d dimensions:  r^(2-2/d)/2 x_1^2 + r^(-2/d)/2 (x_2^2 + ... + x_d^2).
    The subdifferential image of any region has exactly the region's volume.
    """
    a1 = r ** (2.0 - 2.0 / d)
    a2 = r ** (-2.0 / d)

    def w(*coords):
        out = 0.5 * a1 * np.asarray(coords[0]) ** 2
        for c in coords[1:]:
            out = out + 0.5 * a2 * np.asarray(c) ** 2
        return out

    return w


def ridge_profile(R: float = 2.0):
    """A supersolution whose envelope carries a ridge propagating inward.

    Returns (u, w, domain) where w is the convex envelope of u over the
    domain, u touches w only away from the ridge, and the envelope satisfies
    0 in dw(0) and 2 e1 in dw(e1).  The domain is the square [-R, R]^2 union
    the open region where u exceeds w.
    """
    def u(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return 0.5 * x1 ** 2 - (0.5 / R) * np.maximum(0.0, np.abs(x2) - R) ** 2

    def w(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        ridge = 2.0 * np.maximum(0.0, x1 - 1.0)
        bowl = 0.5 * np.maximum(0.0, np.abs(x1 - 1.0) - 1.0) ** 2
        return ridge + bowl + 0.0 * x2

    def domain(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        in_square = (np.abs(x1) <= R) & (np.abs(x2) <= R)
        return in_square | (u(x1, x2) > w(x1, x2))

    return u, w, domain


def double_well(quarter: float = 0.25):
    """x -> (x_1^2 - q)^2, flat-bottomed along x_1; envelope is 0 on |x_1| <= sqrt(q)."""
    def u(x1, x2):
        return (np.asarray(x1) ** 2 - quarter) ** 2 + 0.0 * np.asarray(x2)
    return u
