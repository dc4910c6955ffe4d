import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distcvp.geometry import (
    GeometryError,
    Rect,
    babai_cell,
    boundary_profile,
    cell_geometry,
    closed_form_geometry,
    decode_rect,
    l0_plateau,
    offset_geometry,
    points_near_rect,
    rect_voronoi_area,
    voronoi_polygon,
    polygon_area,
    zero_offset,
)
from distcvp.lattice import make_lattice, nearest_coeffs

from conftest import GRID

NONRECT = [p for p in GRID if abs(p[0] * math.cos(p[1])) > 1e-9]


class TestVoronoiPolygon:
    def test_area_is_determinant(self, any_lattice):
        assert polygon_area(voronoi_polygon(any_lattice)) == pytest.approx(any_lattice.det, abs=1e-12)

    def test_hexagon(self, hexagonal):
        poly = voronoi_polygon(hexagonal)
        assert len(poly) == 6
        assert np.max(poly[:, 1]) == pytest.approx(1 / math.sqrt(3))


class TestZeroOffsetGeometry:
    def test_hexagonal(self, hexagonal):
        g = cell_geometry(hexagonal)
        np.testing.assert_allclose(g.thresholds, (-0.25, -0.25, 0.25, 0.25), atol=1e-12)
        np.testing.assert_allclose(g.lengths, (0.25, 0, 0.5, 0, 0.25), atol=1e-12)
        assert g.heights[4] == pytest.approx(0.288675, abs=1e-6)
        assert g.heights[3] == pytest.approx(0.0, abs=1e-12)

    def test_pentagonal_angle(self, pent):
        g = cell_geometry(pent)
        assert g.lengths[2] == pytest.approx(0.309017, abs=1e-6)
        assert g.lengths[3] == pytest.approx(0.190983, abs=1e-6)
        assert g.lengths[4] == pytest.approx(0.154508, abs=1e-6)
        assert g.heights[4] == pytest.approx(0.162460, abs=1e-6)
        # closed form c(1-2c)/(2s); see the decisions ledger for the tabulated value
        assert g.heights[3] == pytest.approx(0.0620541, abs=1e-6)
        assert g.heights[4] / g.heights[3] == pytest.approx(2.61803, abs=1e-5)

    def test_square_is_trivial(self, square):
        g = cell_geometry(square)
        assert g.is_trivial
        assert all(h == 0 for h in g.heights)
        prof = boundary_profile(square)
        assert np.all(prof.upper.slopes == 0) and np.all(prof.lower.slopes == 0)

    @pytest.mark.parametrize("params", GRID)
    @pytest.mark.parametrize("alpha", [1.0, 0.125])
    def test_matches_closed_forms(self, params, alpha):
        lat = make_lattice(*params, alpha=alpha)
        g = cell_geometry(lat)
        cf = closed_form_geometry(lat)
        if lat.is_rectangular:
            assert g.is_trivial
            return
        np.testing.assert_allclose(g.thresholds, cf["thresholds"], atol=1e-12)
        np.testing.assert_allclose(g.lengths, cf["lengths"], atol=1e-12)
        np.testing.assert_allclose(g.heights, cf["heights"], atol=1e-12)
        assert sum(g.lengths) == pytest.approx(alpha, abs=1e-12)

    @pytest.mark.parametrize("params", NONRECT)
    def test_gamma_table(self, params):
        lat = make_lattice(*params)
        g = cell_geometry(lat)
        rho, theta = params
        gam = np.array(g.slope_sums) / (4 * g.H)
        assert gam[2] == 0
        assert gam[4] == pytest.approx(1 / (4 * rho ** 2 * math.sin(theta) ** 2), rel=1e-12)
        assert gam[0] == pytest.approx(gam[4], rel=1e-12)
        if g.lengths[3] > 1e-12:
            assert gam[3] == pytest.approx(math.cos(theta) / (4 * rho * math.sin(theta) ** 2), rel=1e-12)


class TestBoundaryProfile:
    def test_hexagonal_value(self, hexagonal):
        prof = boundary_profile(hexagonal)
        assert prof.u(0.4) == pytest.approx(0.346410, abs=1e-6)
        assert prof.du(0.4) == pytest.approx(-1 / math.sqrt(3), abs=1e-12)

    def test_flat_band(self, any_lattice):
        g = cell_geometry(any_lattice)
        prof = g.profile
        x = np.linspace(g.thresholds[1], g.thresholds[2], 7)[1:-1]
        np.testing.assert_allclose(prof.u(x), g.H / 2)
        np.testing.assert_allclose(prof.l(x), -g.H / 2)
        assert np.all(prof.slope_sum(x) == 0)

    def test_slope_sum_on_outer_interval(self, pent):
        prof = boundary_profile(pent)
        assert prof.slope_sum(0.45) == pytest.approx(1.05146, abs=1e-5)

    def test_segments_and_breakpoints(self, any_lattice):
        g = cell_geometry(any_lattice)
        for f in (g.profile.upper, g.profile.lower):
            for x, m, y in f.segments():
                assert f(x) == pytest.approx(y)
            inner = f.xs[1:-1]
            for x in inner:
                assert np.min(np.abs(np.array(g.thresholds) - x)) < 1e-12

    def test_lower_below_upper(self, any_lattice):
        prof = boundary_profile(any_lattice)
        x = np.linspace(prof.cell.xmin, prof.cell.xmax, 101)[1:-1]
        assert np.all(prof.l(x) < prof.u(x))

    @pytest.mark.parametrize("params", NONRECT)
    def test_reproduces_decoder_change(self, params):
        lat = make_lattice(*params)
        prof = boundary_profile(lat)
        g = cell_geometry(lat, profile=prof)
        rng = np.random.default_rng(5)
        x1 = rng.uniform(prof.cell.xmin, prof.cell.xmax, 10_000)
        eps = 1e-7
        for f, wall, sign in ((prof.upper, prof.cell.ymax, 1), (prof.lower, prof.cell.ymin, -1)):
            y = f(x1)
            keep = np.abs(y - wall) > 1e-6
            inside = np.column_stack([x1[keep], y[keep] - sign * eps])
            outside = np.column_stack([x1[keep], y[keep] + sign * eps])
            assert np.all(nearest_coeffs(lat, inside) == 0)
            assert np.all(np.any(nearest_coeffs(lat, outside) != 0, axis=1))
        assert g is not None


class TestRectVoronoiArea:
    def test_inside(self, hexagonal):
        r = Rect(-0.1, 0.1, -0.1, 0.1)
        assert rect_voronoi_area(hexagonal, r, (0.0, 0.0)) == pytest.approx(r.area)

    def test_diagonal_triangle(self, hexagonal):
        r = Rect(0.25, 0.5, 0.288675134594813, 0.4330127018922193)
        assert rect_voronoi_area(hexagonal, r, (0.0, 0.0)) == pytest.approx(0.0180422, abs=1e-7)
        assert rect_voronoi_area(hexagonal, r, (0.0, 0.0)) == pytest.approx(r.area / 2, rel=1e-12)

    @pytest.mark.parametrize("params", GRID)
    def test_partition(self, params):
        lat = make_lattice(*params)
        cell = babai_cell(lat)
        rng = np.random.default_rng(7)
        for _ in range(100):
            xs = np.sort(rng.uniform(cell.xmin, cell.xmax, 2))
            ys = np.sort(rng.uniform(cell.ymin, cell.ymax, 2))
            r = Rect(xs[0], xs[1], ys[0], ys[1])
            cands = points_near_rect(lat, r)
            assert len(cands) <= 12
            total = sum(rect_voronoi_area(lat, r, lat.basis @ u.astype(float)) for u in cands)
            assert total == pytest.approx(r.area, abs=1e-9)

    def test_at_most_six_cells_meet_babai_cell(self, any_lattice):
        cell = babai_cell(any_lattice)
        assert decode_rect(any_lattice, cell).n_cells <= 6

    def test_decode_rect_tie_is_lexicographic(self, square):
        r = Rect(0.25, 0.75, -0.25, 0.25)       # split evenly between (0,0) and (1,0)
        assert decode_rect(square, r).point.u == (0, 0)


class TestOffsets:
    def test_zero_offset_relations(self, pent):
        c = pent.c
        off = offset_geometry(pent, c / 2)
        d1, d2, d3, d4 = off.d
        assert d2 == pytest.approx(0.345491, abs=1e-6)
        assert d3 == pytest.approx(c / 2)
        assert d4 == pytest.approx(d2)
        assert off.x0 == pytest.approx((0.0, 0.0), abs=1e-15)
        assert zero_offset(pent).d == pytest.approx(off.d)

    def test_plateau_values(self, pent):
        c = pent.c
        a = offset_geometry(pent, c * (1 - c)).L0
        b = offset_geometry(pent, c * c).L0
        assert a == pytest.approx(b, abs=1e-15)
        lo, hi = l0_plateau(pent)
        assert (lo, hi) == pytest.approx((c * c, c * (1 - c)))

    def test_l0_piecewise_linear_with_plateau(self, pent):
        c = pent.c
        d = np.linspace(1e-6, c, 2001)
        L0 = np.array([offset_geometry(pent, v).L0 for v in d])
        top = L0.max()
        lo, hi = l0_plateau(pent)
        on = d[L0 >= top - 1e-12]
        assert on.min() == pytest.approx(lo, abs=2 * (d[1] - d[0]))
        assert on.max() == pytest.approx(hi, abs=2 * (d[1] - d[0]))
        second = np.diff(L0, 2)
        assert np.sum(np.abs(second) > 1e-9) <= 4  # kinks only near the plateau ends

    @pytest.mark.parametrize("d1", [0.0, -0.1, 0.32])
    def test_rejects_out_of_range(self, pent, d1):
        with pytest.raises(GeometryError):
            offset_geometry(pent, d1)

    def test_rejects_rectangular(self, square):
        with pytest.raises(GeometryError):
            offset_geometry(square, 0.1)

    @pytest.mark.parametrize("frac", [0.05, 0.3, 0.5, 0.7, 0.95, 1.0])
    def test_geometry_at_offset_matches_formula(self, pent, frac):
        c, s = pent.c, pent.s
        off = offset_geometry(pent, frac * c)
        g = cell_geometry(pent, off)
        assert g.L0_fraction == pytest.approx(off.L0, abs=1e-12)
        d1, d2, d3, d4 = off.d
        # band heights of the corner regions
        assert g.band_lengths[2] == pytest.approx(d1 * (1 - c) / s, abs=1e-12)
        assert g.band_lengths[0] == pytest.approx(d3 * (1 - c) / s, abs=1e-12)
        assert g.top_contact == pytest.approx((g.cell.xmin + d1, g.cell.xmax - d2), abs=1e-12)
        assert g.bottom_contact == pytest.approx((g.cell.xmin + d4, g.cell.xmax - d3), abs=1e-12)

    def test_outside_fundamental_rectangle(self, pent):
        with pytest.raises(GeometryError, match="fundamental rectangle"):
            cell_geometry(pent, (0.0, 0.6))

    def test_horizontal_offset_rejected(self, pent):
        with pytest.raises(GeometryError):
            cell_geometry(pent, (0.2, 0.0))

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(NONRECT), st.floats(0.01, 1.0))
    def test_lengths_sum_to_width(self, params, frac):
        lat = make_lattice(*params)
        g = cell_geometry(lat, offset_geometry(lat, frac * lat.c))
        assert sum(g.lengths) == pytest.approx(1.0, abs=1e-12)
        assert sum(g.band_lengths) == pytest.approx(g.H, abs=1e-12)
