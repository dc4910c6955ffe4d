"""Exact machinery for the reduced 2D lattice family.

The lattice is generated by the columns of

    V = alpha * [[1, rho*cos(theta)],
                 [0, rho*sin(theta)]]

with rho >= 1 and 0 <= rho*cos(theta) <= 1/2, which makes the quadratic form
reduced and fixes the six relevant vectors.  Everything here is a pure
function of immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

#: Absolute tolerance on squared distances for geometric comparisons.
DIST_TOL = 1e-12
#: Tolerance used when validating the (rho, theta) constraints.
PARAM_TOL = 1e-12

# Coefficient offsets searched around the Babai point, in lexicographic order
# so that argmax over a boolean mask picks the lexicographically smallest u.
_WINDOW = np.array([(i, j) for i in range(-2, 3) for j in range(-2, 3)], dtype=np.int64)


class LatticeParameterError(ValueError):
    """Raised when (rho, theta, alpha) fall outside the reduced family."""


@dataclass(frozen=True)
class Lattice2D:
    """Validated reduced 2D lattice.  Build it with :func:`make_lattice`."""

    rho: float
    theta: float
    alpha: float = 1.0

    @cached_property
    def c(self) -> float:
        """rho*cos(theta) at unit scale, snapped onto the endpoints 0 and 1/2."""
        c = self.rho * math.cos(self.theta)
        if abs(c) < PARAM_TOL:
            return 0.0
        if abs(c - 0.5) < PARAM_TOL:
            return 0.5
        return c

    @cached_property
    def s(self) -> float:
        """rho*sin(theta) at unit scale."""
        return self.rho * math.sin(self.theta)

    @cached_property
    def basis(self) -> np.ndarray:
        b = self.alpha * np.array([[1.0, self.c], [0.0, self.s]])
        b.setflags(write=False)
        return b

    @property
    def v11(self) -> float:
        return self.alpha

    @property
    def v12(self) -> float:
        return self.alpha * self.c

    @property
    def v22(self) -> float:
        return self.alpha * self.s

    @property
    def det(self) -> float:
        return self.v11 * self.v22

    @property
    def is_rectangular(self) -> bool:
        return self.c == 0.0

    @property
    def is_hexagonal(self) -> bool:
        return self.c == 0.5 and abs(self.rho - 1.0) < PARAM_TOL

    def point(self, u: Sequence[int]) -> "LatticePoint":
        u = (int(u[0]), int(u[1]))
        y = self.basis @ np.array(u, dtype=float)
        return LatticePoint(u, (float(y[0]), float(y[1])))

    def scaled(self, alpha: float) -> "Lattice2D":
        return make_lattice(self.rho, self.theta, alpha)


@dataclass(frozen=True)
class LatticePoint:
    """Lattice point with its integer coefficients ``u`` and coordinates ``y = V u``."""

    u: tuple[int, int]
    y: tuple[float, float]

    def as_array(self) -> np.ndarray:
        return np.array(self.y, dtype=float)


def make_lattice(rho: float, theta: float, alpha: float = 1.0) -> Lattice2D:
    """Validate parameters and return the lattice with basis ``alpha*[[1, rho cos], [0, rho sin]]``.

    Raises
    ------
    LatticeParameterError
        Naming the violated constraint: finiteness, ``rho >= 1``,
        ``0 <= rho*cos(theta) <= 1/2``, ``sin(theta) > 0`` or ``alpha > 0``.
    """
    for name, value in (("rho", rho), ("theta", theta), ("alpha", alpha)):
        if not math.isfinite(value):
            raise LatticeParameterError(f"{name} must be finite, got {value!r}")
    if rho < 1.0 - PARAM_TOL:
        raise LatticeParameterError(f"rho must satisfy rho >= 1, got rho={rho!r}")
    if alpha <= 0.0:
        raise LatticeParameterError(f"alpha must satisfy alpha > 0, got alpha={alpha!r}")
    if math.sin(theta) <= 0.0:
        raise LatticeParameterError(f"sin(theta) must be positive, got theta={theta!r}")
    c = rho * math.cos(theta)
    if c < -PARAM_TOL or c > 0.5 + PARAM_TOL:
        raise LatticeParameterError(
            f"rho*cos(theta) must lie in [0, 1/2], got {c!r} (rho={rho!r}, theta={theta!r})"
        )
    return Lattice2D(float(rho), float(theta), float(alpha))


def relevant_vectors(lat: Lattice2D) -> np.ndarray:
    """The six relevant vectors as rows: +-(1,0), +-(c,s), +-(c-1,s), scaled by alpha."""
    c, s = lat.c, lat.s
    base = np.array([[1.0, 0.0], [c, s], [c - 1.0, s]])
    return lat.alpha * np.vstack([base[0], -base[0], base[1], -base[1], base[2], -base[2]])


def round_half_up(z):
    """Nearest integer with ties sent toward +infinity."""
    return np.floor(np.asarray(z, dtype=float) + 0.5).astype(np.int64)


def babai_coeffs(lat: Lattice2D, x, offset=(0.0, 0.0)) -> np.ndarray:
    """Vectorized nearest-plane coefficients for points ``x`` of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(offset, dtype=float)
    z = x - x0
    u2 = round_half_up(z[..., 1] / lat.v22)
    u1 = round_half_up((z[..., 0] - lat.v12 * u2) / lat.v11)
    return np.stack([u1, u2], axis=-1)


def babai_decode(lat: Lattice2D, x, offset=(0.0, 0.0)) -> LatticePoint:
    """Babai (nearest-plane) point of ``x`` for the partition shifted by ``offset``."""
    u = babai_coeffs(lat, x, offset)
    return lat.point(u)


def nearest_coeffs(lat: Lattice2D, x) -> np.ndarray:
    """Vectorized exact CVP over the 5x5 coefficient window around the Babai point.

    Squared distances within :data:`DIST_TOL` of the minimum are treated as
    ties and resolved toward the lexicographically smallest coefficient pair.
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, 2)
    ub = babai_coeffs(lat, flat)
    cand = ub[:, None, :] + _WINDOW[None, :, :]
    pts = cand.astype(float) @ lat.basis.T
    d2 = np.sum((pts - flat[:, None, :]) ** 2, axis=-1)
    best = d2.min(axis=1, keepdims=True)
    pick = np.argmax(d2 <= best + DIST_TOL, axis=1)
    u = cand[np.arange(len(flat)), pick]
    return u.reshape(x.shape[:-1] + (2,))


def nearest_point(lat: Lattice2D, x) -> LatticePoint:
    """Lattice point minimizing the Euclidean distance to ``x``."""
    return lat.point(nearest_coeffs(lat, x))


def brute_force_coeffs(lat: Lattice2D, x, radius: int = 6) -> np.ndarray:
    """Reference CVP by exhaustive search over ``|u_i| <= radius``; same tie rule."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    r = np.arange(-radius, radius + 1)
    grid = np.array([(i, j) for i in r for j in r], dtype=np.int64)
    pts = grid.astype(float) @ lat.basis.T
    out = np.empty((len(x), 2), dtype=np.int64)
    for start in range(0, len(x), 4096):
        chunk = x[start:start + 4096]
        d2 = np.sum((pts[None, :, :] - chunk[:, None, :]) ** 2, axis=-1)
        best = d2.min(axis=1, keepdims=True)
        out[start:start + 4096] = grid[np.argmax(d2 <= best + DIST_TOL, axis=1)]
    return out


def voronoi_contains(lat: Lattice2D, x, y, strict: bool = False, tol: float = DIST_TOL) -> bool:
    """Whether ``x`` lies in the Voronoi cell of lattice point ``y``.

    The closed cell is tested by default; ``strict=True`` tests the interior,
    requiring every face inequality to hold with margin ``tol``.
    """
    if isinstance(y, LatticePoint):
        y = y.y
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    rv = relevant_vectors(lat)
    # |d|^2 <= |d - r|^2  <=>  2 d.r - |r|^2 <= 0
    slack = 2.0 * (rv @ d) - np.sum(rv * rv, axis=1)
    if strict:
        return bool(np.all(slack < -tol))
    return bool(np.all(slack <= tol))
