"""Babai-cell / Voronoi-cell geometry.

The Babai cell of the origin under offset ``x0`` is the rectangle
``x0 + [-a/2, a/2) x [-a s/2, a s/2)``.  Inside it the Voronoi boundaries of
the lattice point at the origin are straight segments; this module extracts
them as piecewise-linear profiles

* ``u(x1)``, ``l(x1)``: upper/lower end of the vertical slice of V_0 inside the
  cell (the cuts used by the 12 order), and
* ``left(x2)``, ``right(x2)``: ends of the horizontal slice (21 order),

and derives thresholds, interval lengths and boundary excursions from them.
Only vertical offsets are supported by the profile machinery; a horizontal
offset puts a vertical Voronoi wall strictly inside the cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterator, Sequence

import numpy as np

from .lattice import Lattice2D, LatticePoint, relevant_vectors

GEOM_TOL = 1e-12
MERGE_TOL = 1e-12


class GeometryError(ValueError):
    """Offset or configuration outside what the cell geometry can describe."""


# --------------------------------------------------------------------------
# Convex polygons
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[xmin, xmax] x [ymin, ymax]``."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def polygon(self) -> np.ndarray:
        return np.array([[self.xmin, self.ymin], [self.xmax, self.ymin],
                         [self.xmax, self.ymax], [self.xmin, self.ymax]])

    def shifted(self, dx: float, dy: float) -> "Rect":
        return Rect(self.xmin + dx, self.xmax + dx, self.ymin + dy, self.ymax + dy)


def clip_halfplane(poly: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Clip a convex polygon (rows = CCW vertices) to ``{p : a.p <= b}``."""
    if len(poly) == 0:
        return poly
    out = []
    vals = poly @ a - b
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        vp, vq = vals[i], vals[(i + 1) % n]
        if vp <= 0.0:
            out.append(p)
        if (vp < 0.0 < vq) or (vq < 0.0 < vp):
            t = vp / (vp - vq)
            out.append(p + t * (q - p))
    if not out:
        return np.empty((0, 2))
    out = np.array(out)
    # merge near-duplicate consecutive vertices
    keep = [0]
    for i in range(1, len(out)):
        if np.max(np.abs(out[i] - out[keep[-1]])) > MERGE_TOL:
            keep.append(i)
    if len(keep) > 1 and np.max(np.abs(out[keep[-1]] - out[keep[0]])) <= MERGE_TOL:
        keep.pop()
    return out[keep]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _halfplanes(lat: Lattice2D, y) -> tuple[np.ndarray, np.ndarray]:
    rv = relevant_vectors(lat)
    y = np.asarray(y, dtype=float)
    return rv, 0.5 * np.sum(rv * rv, axis=1) + rv @ y


def voronoi_polygon(lat: Lattice2D, y=(0.0, 0.0)) -> np.ndarray:
    """Vertices (CCW) of the Voronoi cell of the lattice point at ``y``."""
    if isinstance(y, LatticePoint):
        y = y.y
    r = 2.0 * lat.alpha * max(1.0, lat.rho)
    y = np.asarray(y, dtype=float)
    poly = Rect(y[0] - r, y[0] + r, y[1] - r, y[1] + r).polygon()
    for a, b in zip(*_halfplanes(lat, y)):
        poly = clip_halfplane(poly, a, b)
    return poly


@lru_cache(maxsize=256)
def covering_radius(lat: Lattice2D) -> float:
    return float(np.max(np.linalg.norm(voronoi_polygon(lat), axis=1)))


def points_near_rect(lat: Lattice2D, rect: Rect) -> np.ndarray:
    """Coefficients of every lattice point whose Voronoi cell can meet ``rect``.

    Returned in lexicographic order of ``u``.
    """
    R = covering_radius(lat) + 1e-9 * lat.alpha
    u2_lo = math.floor((rect.ymin - R) / lat.v22)
    u2_hi = math.ceil((rect.ymax + R) / lat.v22)
    out = []
    for u2 in range(u2_lo, u2_hi + 1):
        u1_lo = math.floor((rect.xmin - R - lat.v12 * u2) / lat.v11)
        u1_hi = math.ceil((rect.xmax + R - lat.v12 * u2) / lat.v11)
        for u1 in range(u1_lo, u1_hi + 1):
            py = lat.basis @ np.array([u1, u2], dtype=float)
            dx = max(rect.xmin - py[0], 0.0, py[0] - rect.xmax)
            dy = max(rect.ymin - py[1], 0.0, py[1] - rect.ymax)
            if math.hypot(dx, dy) <= R:
                out.append((u1, u2))
    out.sort()
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def rect_voronoi_area(lat: Lattice2D, rect: Rect, y) -> float:
    """Area of ``rect`` intersected with the Voronoi cell of ``y``."""
    if isinstance(y, LatticePoint):
        y = y.y
    poly = rect.polygon()
    for a, b in zip(*_halfplanes(lat, y)):
        poly = clip_halfplane(poly, a, b)
        if len(poly) == 0:
            return 0.0
    return polygon_area(poly)


@dataclass(frozen=True)
class RectDecision:
    point: LatticePoint
    area: float          # area of rect inside the winning Voronoi cell
    rect_area: float
    n_cells: int         # Voronoi cells meeting rect with positive area

    @property
    def error_area(self) -> float:
        return max(self.rect_area - self.area, 0.0)


def decode_rect(lat: Lattice2D, rect: Rect, area_tol: float = 1e-12) -> RectDecision:
    """Lattice point whose Voronoi cell covers the largest part of ``rect``.

    Ties (areas within ``area_tol * rect.area``) go to the lexicographically
    smallest coefficient vector.
    """
    cands = points_near_rect(lat, rect)
    areas = np.array([rect_voronoi_area(lat, rect, lat.basis @ u.astype(float)) for u in cands])
    tol = area_tol * max(rect.area, 0.0)
    best = areas.max()
    k = int(np.argmax(areas >= best - tol))
    n_cells = int(np.count_nonzero(areas > tol + 1e-15 * lat.alpha ** 2))
    return RectDecision(lat.point(cands[k]), float(areas[k]), rect.area, n_cells)


# --------------------------------------------------------------------------
# Offsets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OffsetSpec:
    """Shift ``x0`` of the rectangular partition (the lattice is not moved).

    For the vertical family ``d`` holds ``(d1, d2, d3, d4)``: the horizontal
    widths of the four corner regions of the Babai cell cut off by slanted
    Voronoi boundaries (top-left, top-right, bottom-right, bottom-left).
    """

    x0: tuple[float, float] = (0.0, 0.0)
    d: tuple[float, float, float, float] | None = None
    L0: float | None = None

    @property
    def d1(self) -> float | None:
        return None if self.d is None else self.d[0]


def offset_geometry(lat: Lattice2D, d1: float) -> OffsetSpec:
    """Vertical-offset family parameterized by the top-left corner width ``d1``.

    For ``0 < d1 <= alpha*c`` (``c = rho cos theta``)::

        d2 = d1 (1-c)/c,  d3 = c - d1,  d4 = (1-c)(c-d1)/c
        L0 = 1 - max(d1, d4) - max(d2, d3)

    (unit scale; everything is multiplied by alpha).  ``d1 = c/2`` is the
    zero offset.
    """
    c, s, a = lat.c, lat.s, lat.alpha
    if c <= 0.0:
        raise GeometryError("offset family is undefined for a rectangular lattice")
    d = d1 / a
    if not (0.0 < d <= c * (1.0 + 1e-12)):
        raise GeometryError(f"d1 must satisfy 0 < d1 <= alpha*rho*cos(theta) = {a * c!r}, got {d1!r}")
    d = min(d, c)
    d2 = d * (1.0 - c) / c
    d3 = c - d
    d4 = (1.0 - c) * (c - d) / c
    L0 = 1.0 - max(d, d4) - max(d2, d3)
    x02 = (d - 0.5 * c) * (1.0 - c) / s
    return OffsetSpec((0.0, a * x02), (a * d, a * d2, a * d3, a * d4), a * L0)


def zero_offset(lat: Lattice2D) -> OffsetSpec:
    if lat.is_rectangular:
        return OffsetSpec((0.0, 0.0), None, lat.alpha)
    spec = offset_geometry(lat, 0.5 * lat.alpha * lat.c)
    return OffsetSpec((0.0, 0.0), spec.d, spec.L0)


def l0_plateau(lat: Lattice2D) -> tuple[float, float]:
    """Closed-form interval of d1 on which L0(d1) is maximal: [c^2, c(1-c)] (times alpha)."""
    c = lat.c
    return (lat.alpha * c * c, lat.alpha * c * (1.0 - c))


def offset_vector(offset) -> np.ndarray:
    if offset is None:
        return np.zeros(2)
    if isinstance(offset, OffsetSpec):
        return np.asarray(offset.x0, dtype=float)
    return np.asarray(offset, dtype=float).reshape(2)


def babai_cell(lat: Lattice2D, offset=None) -> Rect:
    """Babai cell of the origin under ``offset`` (half-open on the max sides)."""
    x0 = offset_vector(offset)
    hw, hh = 0.5 * lat.v11, 0.5 * lat.v22
    if not (-hw - GEOM_TOL <= x0[0] < hw and -hh - GEOM_TOL <= x0[1] < hh):
        raise GeometryError(
            f"offset {tuple(x0)} outside the fundamental rectangle [-{hw}, {hw}) x [-{hh}, {hh})"
        )
    return Rect(float(x0[0] - hw), float(x0[0] + hw), float(x0[1] - hh), float(x0[1] + hh))


# --------------------------------------------------------------------------
# Profiles
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous piecewise-linear function given by breakpoints and values."""

    xs: np.ndarray
    ys: np.ndarray

    def __call__(self, x):
        return np.interp(x, self.xs, self.ys)

    @cached_property
    def slopes(self) -> np.ndarray:
        dx = np.diff(self.xs)
        return np.divide(np.diff(self.ys), dx, out=np.zeros_like(dx), where=dx > 0)

    def slope(self, x):
        """Right-continuous derivative."""
        i = np.searchsorted(self.xs, x, side="right") - 1
        i = np.clip(i, 0, len(self.slopes) - 1)
        return self.slopes[i]

    def segments(self) -> list[tuple[float, float, float]]:
        """``(breakpoint, slope, value)`` for each linear piece."""
        return [(float(x), float(m), float(y)) for x, m, y in zip(self.xs[:-1], self.slopes, self.ys[:-1])]

    def integral_abs_slope(self, a: float, b: float) -> float:
        """Total variation on [a, b]."""
        if b <= a:
            return 0.0
        pts = np.concatenate([[a], self.xs[(self.xs > a) & (self.xs < b)], [b]])
        return float(np.sum(np.abs(np.diff(self(pts)))))


def _slice_lines(lat: Lattice2D, axis: int):
    """Face lines of V_0 written as functions of coordinate ``axis``.

    Returns (upper, lower, bounds) where upper/lower are lists of (a, b) with
    the other coordinate <= a + b*t (resp. >=), and bounds is the [lo, hi]
    range of ``t`` allowed by faces parallel to the slicing direction.
    """
    rv = relevant_vectors(lat)
    h = 0.5 * np.sum(rv * rv, axis=1)
    other = 1 - axis
    upper, lower = [], []
    lo, hi = -np.inf, np.inf
    for r, hr in zip(rv, h):
        ro, rt = r[other], r[axis]
        if abs(ro) < 1e-15:
            # r_t * t <= hr
            if rt > 0:
                hi = min(hi, hr / rt)
            elif rt < 0:
                lo = max(lo, hr / rt)
            continue
        line = (hr / ro, -rt / ro)
        (upper if ro > 0 else lower).append(line)
    return upper, lower, (lo, hi)


def _envelope(lines, t_lo: float, t_hi: float, cap: float, upper: bool) -> PiecewiseLinear:
    lines = list(lines) + [(cap, 0.0)]
    brk = {t_lo, t_hi}
    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            (a1, b1), (a2, b2) = lines[i], lines[j]
            if abs(b1 - b2) > 1e-15:
                t = (a2 - a1) / (b1 - b2)
                if t_lo < t < t_hi:
                    brk.add(t)
    xs = np.array(sorted(brk))
    vals = np.array([[a + b * x for a, b in lines] for x in xs])
    ys = vals.min(axis=1) if upper else vals.max(axis=1)
    # drop collinear interior breakpoints
    keep = [0]
    for k in range(1, len(xs) - 1):
        m1 = (ys[k] - ys[keep[-1]]) / (xs[k] - xs[keep[-1]])
        m2 = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
        if abs(m1 - m2) > 1e-12 and xs[k] - xs[keep[-1]] > MERGE_TOL:
            keep.append(k)
    keep.append(len(xs) - 1)
    return PiecewiseLinear(xs[keep], ys[keep])


@dataclass(frozen=True)
class BoundaryProfile:
    """Voronoi boundaries of V_0 inside the Babai cell of the origin.

    ``upper``/``lower`` describe u(x1) and l(x1); where no slanted boundary
    crosses a column they coincide with the cell walls (slope 0).
    ``left``/``right`` are the analogous horizontal-slice profiles.
    """

    cell: Rect
    upper: PiecewiseLinear
    lower: PiecewiseLinear
    left: PiecewiseLinear
    right: PiecewiseLinear

    def u(self, x1):
        return self.upper(x1)

    def l(self, x1):  # noqa: E743 - name mirrors the math
        return self.lower(x1)

    def du(self, x1):
        return self.upper.slope(x1)

    def dl(self, x1):
        return self.lower.slope(x1)

    def slope_sum(self, x1):
        return np.abs(self.du(x1)) + np.abs(self.dl(x1))

    def split_12(self, x1) -> np.ndarray:
        """Probabilities (below l, between, above u) of a uniform x2 in the column at x1."""
        H = self.cell.height
        u, l = self.u(x1), self.l(x1)
        return np.stack([(l - self.cell.ymin) / H, (u - l) / H, (self.cell.ymax - u) / H], axis=-1)

    def split_21(self, x2) -> np.ndarray:
        """Probabilities (left of, between, right of) the cuts in the row at x2."""
        L = self.cell.width
        a, b = self.left(x2), self.right(x2)
        return np.stack([(a - self.cell.xmin) / L, (b - a) / L, (self.cell.xmax - b) / L], axis=-1)


def boundary_profile(lat: Lattice2D, offset=None) -> BoundaryProfile:
    cell = babai_cell(lat, offset)
    tol = GEOM_TOL * lat.alpha
    up, low, (xlo, xhi) = _slice_lines(lat, axis=0)
    if xlo > cell.xmin + tol or xhi < cell.xmax - tol:
        raise GeometryError(
            "horizontal offset places a vertical Voronoi wall inside the cell; "
            "only vertical offsets are supported"
        )
    upper = _envelope(up, cell.xmin, cell.xmax, cell.ymax, upper=True)
    lower = _envelope(low, cell.xmin, cell.xmax, cell.ymin, upper=False)
    xs = np.union1d(upper.xs, lower.xs)
    if np.any(upper(xs) - lower(xs) < -tol):
        raise GeometryError("offset leaves columns of the cell without the origin's Voronoi cell")

    rt, lf, (ylo, yhi) = _slice_lines(lat, axis=1)
    if ylo > cell.ymin + tol or yhi < cell.ymax - tol:
        raise GeometryError("offset places a horizontal Voronoi wall inside the cell")
    right = _envelope(rt, cell.ymin, cell.ymax, cell.xmax, upper=True)
    left = _envelope(lf, cell.ymin, cell.ymax, cell.xmin, upper=False)
    ys = np.union1d(right.xs, left.xs)
    if np.any(right(ys) - left(ys) < -tol):
        raise GeometryError("offset leaves rows of the cell without the origin's Voronoi cell")
    return BoundaryProfile(cell, upper, lower, left, right)


# --------------------------------------------------------------------------
# Thresholds, lengths, heights
# --------------------------------------------------------------------------

def _contact(f: PiecewiseLinear, wall: float, tol: float) -> tuple[float, float] | None:
    at = f.xs[np.abs(f.ys - wall) <= tol]
    if len(at) == 0:
        return None
    return float(at.min()), float(at.max())


def _check_no_kinks(f: PiecewiseLinear, edges: Sequence[float], tol: float) -> None:
    inner = f.xs[1:-1]
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a > tol and np.any((inner > a + tol) & (inner < b - tol)):
            raise GeometryError("offset outside the supported family: boundary slope changes inside an interval")


@dataclass(frozen=True)
class CellGeometry:
    """Interval structure of the Babai cell for both communication orders.

    Index conventions: ``lengths``, ``heights`` and ``slope_sums`` are
    indexed j = -2..2 (position j+2); ``band_lengths``, ``band_spans`` and
    ``band_slope_sums`` are indexed j = -1..1 (position j+1).
    ``heights[j]`` is the x2-excursion of the slanted boundaries over I_j;
    ``band_spans[j]`` is the x1-excursion over the horizontal band J_j.
    """

    cell: Rect
    thresholds: tuple[float, float, float, float]
    lengths: tuple[float, float, float, float, float]
    heights: tuple[float, float, float, float, float]
    slope_sums: tuple[float, float, float, float, float]
    top_contact: tuple[float, float]
    bottom_contact: tuple[float, float]
    band_edges: tuple[float, float]
    band_lengths: tuple[float, float, float]
    band_spans: tuple[float, float, float]
    band_slope_sums: tuple[float, float, float]
    left_contact: tuple[float, float]
    right_contact: tuple[float, float]
    profile: BoundaryProfile | None = field(default=None, repr=False, compare=False)

    @property
    def L(self) -> float:
        return self.cell.width

    @property
    def H(self) -> float:
        return self.cell.height

    @property
    def interval_edges(self) -> np.ndarray:
        return np.array([self.cell.xmin, *self.thresholds, self.cell.xmax])

    @property
    def band_edge_list(self) -> np.ndarray:
        return np.array([self.cell.ymin, *self.band_edges, self.cell.ymax])

    @property
    def p_intervals(self) -> np.ndarray:
        """P(W1 = j), j = -2..2, for a uniform source."""
        return np.array(self.lengths) / self.L

    @property
    def p_bands(self) -> np.ndarray:
        """P(W2 = j), j = -1..1, for a uniform source."""
        return np.array(self.band_lengths) / self.H

    @property
    def L0_fraction(self) -> float:
        return self.lengths[2] / self.L

    @property
    def H0_fraction(self) -> float:
        return self.band_lengths[1] / self.H

    @property
    def is_trivial(self) -> bool:
        """No slanted boundary anywhere in the cell (Babai cell equals Voronoi cell)."""
        return sum(self.heights) <= GEOM_TOL * self.H


def cell_geometry(lat: Lattice2D, offset=None, profile: BoundaryProfile | None = None) -> CellGeometry:
    """Thresholds, interval lengths L_j and excursions H_j of the (offset) Babai cell.

    At zero offset these equal, at unit scale::

        t = ((c-1)/2, -c/2, c/2, (1-c)/2)
        L = (c/2, 1/2 - c, c, 1/2 - c, c/2)
        H_{+-2} = c/(2s),  H_{+-1} = c(1-2c)/(2s)

    For other vertical offsets they are read off the boundary profile.
    """
    prof = profile if profile is not None else boundary_profile(lat, offset)
    cell = prof.cell
    tol = 1e-10 * lat.alpha

    top = _contact(prof.upper, cell.ymax, tol)
    bot = _contact(prof.lower, cell.ymin, tol)
    if top is None or bot is None:
        raise GeometryError("offset outside the supported family: V_0 does not reach both cell walls")
    t = (min(top[0], bot[0]), max(top[0], bot[0]), min(top[1], bot[1]), max(top[1], bot[1]))
    if t[1] > t[2] + tol:
        raise GeometryError("offset outside the supported family: no column is free of slanted boundaries")
    t = (t[0], t[1], max(t[1], t[2]), t[3])
    edges = [cell.xmin, *t, cell.xmax]
    _check_no_kinks(prof.upper, edges, tol)
    _check_no_kinks(prof.lower, edges, tol)
    lengths = tuple(float(b - a) for a, b in zip(edges[:-1], edges[1:]))
    heights = tuple(
        prof.upper.integral_abs_slope(a, b) + prof.lower.integral_abs_slope(a, b)
        for a, b in zip(edges[:-1], edges[1:])
    )
    slope_sums = tuple(h / ln if ln > tol else float(prof.slope_sum(0.5 * (a + b)))
                       for h, ln, a, b in zip(heights, lengths, edges[:-1], edges[1:]))

    lc = _contact(prof.left, cell.xmin, tol)
    rc = _contact(prof.right, cell.xmax, tol)
    if lc is None or rc is None:
        raise GeometryError("offset outside the supported family: V_0 does not reach both side walls")
    if abs(lc[0] - rc[0]) > tol or abs(lc[1] - rc[1]) > tol:
        raise GeometryError("offset outside the supported family: side-wall contacts differ")
    tau = (lc[0], lc[1])
    bedges = [cell.ymin, *tau, cell.ymax]
    _check_no_kinks(prof.left, bedges, tol)
    _check_no_kinks(prof.right, bedges, tol)
    band_lengths = tuple(float(b - a) for a, b in zip(bedges[:-1], bedges[1:]))
    band_spans = tuple(
        prof.left.integral_abs_slope(a, b) + prof.right.integral_abs_slope(a, b)
        for a, b in zip(bedges[:-1], bedges[1:])
    )
    band_slope_sums = tuple(
        k / h if h > tol else float(abs(prof.left.slope(0.5 * (a + b))) + abs(prof.right.slope(0.5 * (a + b))))
        for k, h, a, b in zip(band_spans, band_lengths, bedges[:-1], bedges[1:])
    )
    return CellGeometry(cell, t, lengths, heights, slope_sums, top, bot, tau,
                        band_lengths, band_spans, band_slope_sums, lc, rc, prof)


def closed_form_geometry(lat: Lattice2D) -> dict[str, tuple]:
    """Zero-offset thresholds, lengths and heights from the closed forms."""
    c, s, a = lat.c, lat.s, lat.alpha
    t = (a * (c - 1) / 2, -a * c / 2, a * c / 2, a * (1 - c) / 2)
    L = (a * c / 2, a * (0.5 - c), a * c, a * (0.5 - c), a * c / 2)
    h2 = a * c / (2 * s)
    h1 = a * c * (1 - 2 * c) / (2 * s)
    return {"thresholds": t, "lengths": L, "heights": (h2, h1, 0.0, h1, h2)}


def iter_interval_index(geom: CellGeometry) -> Iterator[int]:
    """Nonzero subinterval indices with positive length."""
    for j in (-2, -1, 1, 2):
        if geom.lengths[j + 2] > GEOM_TOL * geom.L and geom.heights[j + 2] > 0:
            yield j
