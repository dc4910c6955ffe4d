import math

import numpy as np
import pytest

from distcvp.analytic import infinite_round_quantities, pe_rate_constant
from distcvp.geometry import babai_cell, boundary_profile, decode_rect, offset_geometry, rect_voronoi_area
from distcvp.lattice import make_lattice, nearest_coeffs, nearest_point
from distcvp.protocols import (
    InfiniteRoundPlan,
    ProtocolConfig,
    ProtocolError,
    SingleRoundPlan,
    Stage1Model,
    config_from_rate,
    run_batch,
    run_infinite_round,
    run_single_round,
    run_stage1,
)

from conftest import NONRECT_GRID


def _uniform(lat, n, seed, offset=None):
    cell = babai_cell(lat, offset)
    u = np.random.default_rng(seed).random((n, 2))
    return np.column_stack([cell.xmin + u[:, 0] * cell.width, cell.ymin + u[:, 1] * cell.height])


class TestConfig:
    def test_order_aliases(self):
        assert ProtocolConfig("infinite").order == "inf"
        assert ProtocolConfig(12).order == "12"
        with pytest.raises(ValueError):
            ProtocolConfig("13")

    def test_max_rounds_positive(self):
        with pytest.raises(ValueError):
            ProtocolConfig("inf", max_rounds=0)

    def test_missing_bins(self, pent):
        with pytest.raises(ProtocolError, match="N_1"):
            SingleRoundPlan(pent, ProtocolConfig("12", {-2: 3, -1: 2, 2: 3}))

    def test_hexagonal_needs_only_outer_bins(self, hexagonal):
        SingleRoundPlan(hexagonal, ProtocolConfig("12", {-2: 3, 2: 3}))


class TestStage1:
    def test_single_cell_source_costs_nothing(self, pent):
        for x in _uniform(pent, 50, 0):
            u, tr = run_stage1(pent, x)
            assert u == (0, 0)
            assert tr.bits == 0.0
            assert [m.label for m in tr.messages] == ["u2", "u1"]

    def test_hexagonal_example(self, hexagonal):
        u, _ = run_stage1(hexagonal, (0.6, 0.5))
        assert u == (0, 1)

    def test_model_codelengths(self, square):
        lat = square.scaled(2 ** -4)
        x = np.random.default_rng(0).random((20_000, 2))
        from distcvp.lattice import babai_coeffs
        model = Stage1Model.from_samples(babai_coeffs(lat, x))
        total = np.mean([run_stage1(lat, xi, model=model)[1].bits for xi in x[:4000]])
        # cells are centred on k/16, so [0, 1) holds 15 full and 2 half columns per axis
        exact = 2 * (15 / 16 * 4 + 2 / 32 * 5)
        assert exact == 8.125
        assert total == pytest.approx(exact, abs=0.05)


class TestSingleRound:
    def test_flat_band_sends_only_w(self, pent):
        cfg = config_from_rate(pent, 6.0)
        tr = run_single_round(pent, (0.0, 0.3), cfg)
        labels = [m.label for m in tr.messages]
        assert labels == ["u2", "u1", "W1"]
        assert tr.messages[-1].symbol == 0
        assert tr.decode1.u == tr.decode2.u == (0, 0)

    def test_hexagonal_trace(self, hexagonal):
        cfg = ProtocolConfig("12", {-2: 4, 2: 4})
        plan = SingleRoundPlan(hexagonal, cfg)
        tr = run_single_round(hexagonal, (0.45, 0.42), cfg, plan)
        msg = {m.label: m for m in tr.messages}
        assert msg["W1"].symbol == 2
        assert plan.bin_interval(2, msg["Z1"].symbol) == pytest.approx((0.4375, 0.5))
        lo, hi = plan.cuts(2, msg["Z1"].symbol)
        assert hi == pytest.approx(boundary_profile(hexagonal).u(0.46875))
        assert msg["Z2"].symbol == 1
        np.testing.assert_allclose(tr.decode1.y, (0.5, 0.866025), atol=1e-6)
        assert tr.decode1 == tr.decode2 == nearest_point(hexagonal, (0.45, 0.42))
        assert msg["W1"].codelength == pytest.approx(2.0)      # P(I_2) = 1/4
        assert msg["Z1"].codelength == pytest.approx(2.0)      # 4 bins
        assert tr.bits == pytest.approx(sum(m.codelength for m in tr.messages))

    @pytest.mark.parametrize("order", ["12", "21"])
    @pytest.mark.parametrize("params", NONRECT_GRID[:4])
    def test_nodes_agree_and_batch_matches(self, params, order):
        lat = make_lattice(*params)
        cfg = config_from_rate(lat, {"12": 5.0, "21": 2.5}[order], order)
        plan = SingleRoundPlan(lat, cfg)
        x = _uniform(lat, 600, 1) + lat.basis @ np.array([2.0, -1.0])
        u, res = run_batch(lat, x, cfg, plan)
        for xi, d, b in zip(x, res.decoded + u, res.bits):
            tr = run_single_round(lat, xi, cfg, plan)
            assert tr.agree
            assert tr.decode1.u == tuple(d)
            assert tr.stage_bits(("W1", "Z1", "W2", "Z2")) == pytest.approx(b, abs=1e-12)

    @pytest.mark.parametrize("order", ["12", "21"])
    def test_fast_decoder_matches_polygon_clipping(self, pent, order):
        cfg = config_from_rate(pent, {"12": 5.0, "21": 2.5}[order], order)
        plan = SingleRoundPlan(pent, cfg)
        assert all(nb is not None for k, nb in enumerate(plan._neighbours) if k != plan.zero)
        for w, z, k2 in plan.iter_pieces():
            rect = plan.piece(w, z, k2)
            ref = (0, 0) if rect.area <= 0 else decode_rect(pent, rect).point.u
            assert plan.decode(w, z, k2) == ref

    def test_exact_error_matches_polygon_clipping(self, pent):
        plan = SingleRoundPlan(pent, config_from_rate(pent, 4.0, "12"))
        ref = sum(decode_rect(pent, plan.piece(*p)).error_area for p in plan.iter_pieces()
                  if plan.piece(*p).area > 0) / plan.cell.area
        assert plan.exact_error_prob() == pytest.approx(ref, rel=1e-9, abs=1e-15)

    @pytest.mark.parametrize("order", ["12", "21"])
    def test_exact_error_matches_simulation(self, pent, order):
        cfg = config_from_rate(pent, 4.0, order)
        plan = SingleRoundPlan(pent, cfg)
        x = _uniform(pent, 400_000, 2)
        u, res = run_batch(pent, x, cfg, plan)
        wrong = np.any(res.decoded + u != nearest_coeffs(pent, x), axis=1).mean()
        pe = plan.exact_error_prob()
        assert abs(wrong - pe) < 4 * math.sqrt(pe * (1 - pe) / len(x))
        h = plan.exact_rate()
        assert res.bits.mean() == pytest.approx(h, abs=4 * res.bits.std() / math.sqrt(len(x)))

    @pytest.mark.parametrize("params", NONRECT_GRID[:3])
    @pytest.mark.parametrize("order", ["12", "21"])
    def test_error_nonincreasing_in_bins(self, params, order):
        lat = make_lattice(*params)
        idx = (-2, -1, 1, 2) if order == "12" else (-1, 1)
        for vary in idx:
            pe = []
            for n in (1, 2, 3, 4, 8, 16):
                bins = {j: 4 for j in idx}
                bins[vary] = n
                pe.append(SingleRoundPlan(lat, ProtocolConfig(order, bins)).exact_error_prob())
            assert np.all(np.diff(pe) <= 1e-15)

    def test_square_never_errs(self, square):
        plan = SingleRoundPlan(square, ProtocolConfig("12", {}))
        x = _uniform(square, 10_000, 3)
        u, res = run_batch(square, x, ProtocolConfig("12", {}), plan)
        assert np.all(res.decoded == 0) and np.all(res.bits == 0)
        assert plan.exact_error_prob() == 0.0

    @pytest.mark.parametrize("order, rates", [(12, (4.0, 8.0)), (21, (2.0, 3.0))])
    def test_exact_error_approaches_constant(self, pent, order, rates):
        # the 21 order spends most of the rate on the error-free band, so its bin counts grow much faster
        k = pe_rate_constant(pent, order=order)
        ratios = []
        for rate in rates:
            plan = SingleRoundPlan(pent, config_from_rate(pent, rate, str(order)))
            ratios.append(plan.exact_error_prob() * 2 ** (plan.exact_rate() * k.decay) / k.constant)
        assert abs(ratios[-1] - 1) < abs(ratios[0] - 1) + 1e-6
        assert ratios[-1] == pytest.approx(1.0, abs=1e-4)

    def test_offset_cell(self, pent):
        off = offset_geometry(pent, 0.2)
        cfg = config_from_rate(pent, 6.0, "12", off)
        x = _uniform(pent, 300, 4, off)
        for xi in x:
            tr = run_single_round(pent, xi, cfg)
            assert tr.messages[0].symbol == 0 and tr.messages[1].symbol == 0
            assert tr.agree


class TestInfiniteRound:
    def test_trace_flat_band(self, hexagonal):
        tr = run_infinite_round(hexagonal, (0.1, 0.0))
        assert [m.label for m in tr.messages] == ["u2", "u1", "W2"]
        assert tr.bits == pytest.approx(math.log2(1.5), abs=1e-12)
        assert tr.decode1.u == tr.decode2.u == (0, 0)

    def test_trace_error_rectangle(self, hexagonal):
        x = (0.45, 0.42)
        tr = run_infinite_round(hexagonal, x)
        msg = {m.label: m for m in tr.messages}
        assert msg["W2"].symbol == 1 and msg["W1"].symbol == 1
        r = InfiniteRoundPlan(hexagonal).rect(1, 1)
        assert (r.rect.xmin, r.rect.xmax) == pytest.approx((0.25, 0.5))
        assert (r.rect.ymin, r.rect.ymax) == pytest.approx((0.288675, 0.433013), abs=1e-6)
        assert r.error and r.slope == -1
        assert tr.decode1 == tr.decode2 == nearest_point(hexagonal, x)
        n_bits = sum(1 for m in tr.messages if m.label in ("B1", "B2"))
        assert n_bits >= 2 and tr.rounds == 2 + n_bits // 2
        assert tr.bits == pytest.approx(math.log2(6) + 2 + n_bits)

    @pytest.mark.parametrize("params", NONRECT_GRID)
    def test_round1_structure(self, params):
        plan = InfiniteRoundPlan(make_lattice(*params))
        assert len(plan.rects) == 7
        err = plan.error_rects
        assert len(err) == 4
        prof = plan.profile
        for r in err:
            f = prof.upper if r.w2 == 1 else prof.lower
            rc = r.rect
            ends = ((rc.xmin, rc.ymin), (rc.xmax, rc.ymax)) if r.slope > 0 else ((rc.xmin, rc.ymax), (rc.xmax, rc.ymin))
            for xx, yy in ends:
                assert abs(f(xx) - yy) < 1e-9
        for r in plan.rects:
            if not r.error and r.rect.area > 0:
                assert rect_voronoi_area(plan.lat, r.rect, plan.lat.basis @ np.array(r.point, float)) == \
                    pytest.approx(r.rect.area, rel=1e-12)

    def test_probabilities_match_analytic(self, pent):
        plan = InfiniteRoundPlan(pent)
        q = infinite_round_quantities(pent)
        np.testing.assert_allclose(plan.Q, q.Q, atol=1e-12)
        np.testing.assert_allclose(plan.P[1], q.P_top, atol=1e-12)
        np.testing.assert_allclose(plan.P[-1], q.P_bottom, atol=1e-12)

    @pytest.mark.parametrize("d1", [0.05, 0.2, 0.3])
    def test_offset_probabilities_match_analytic(self, pent, d1):
        plan = InfiniteRoundPlan(pent, offset_geometry(pent, d1))
        q = infinite_round_quantities(pent, d1)
        np.testing.assert_allclose(plan.Q, q.Q, atol=1e-12)
        np.testing.assert_allclose(plan.P[1], q.P_top, atol=1e-12)
        np.testing.assert_allclose(plan.P[-1], q.P_bottom, atol=1e-12)
        assert len(plan.error_rects) == 4

    @pytest.mark.parametrize("params", NONRECT_GRID[:4])
    def test_scalar_and_batch_agree(self, params):
        lat = make_lattice(*params)
        plan = InfiniteRoundPlan(lat)
        cfg = ProtocolConfig("inf")
        x = _uniform(lat, 800, 5) - lat.basis @ np.array([1.0, 3.0])
        u, res = run_batch(lat, x, cfg, plan)
        ref = nearest_coeffs(lat, x)
        np.testing.assert_array_equal(res.decoded + u, ref)
        for xi, d, b, r in zip(x, res.decoded + u, res.bits, res.rounds):
            tr = run_infinite_round(lat, xi, cfg, plan)
            assert tr.agree and tr.decode1.u == tuple(d)
            assert tr.stage_bits(("W2", "W1", "B1", "B2")) == pytest.approx(b)
            assert tr.rounds - 1 == r

    def test_zero_error_offsets(self, pent):
        for d1 in (0.03, 0.1, pent.c / 2, 0.25, pent.c):
            off = offset_geometry(pent, d1)
            cfg = ProtocolConfig("inf", offset=off)
            x = _uniform(pent, 50_000, 6, off)
            u, res = run_batch(pent, x, cfg)
            np.testing.assert_array_equal(res.decoded + u, nearest_coeffs(pent, x))

    def test_halting_geometric(self, hexagonal):
        x = _uniform(hexagonal, 200_000, 7)
        _, res = run_batch(hexagonal, x, ProtocolConfig("inf"))
        n = res.extra_rounds[res.extra_rounds > 0]
        assert np.mean(n) == pytest.approx(2.0, abs=0.05)

    def test_max_rounds_guard(self, hexagonal):
        plan = InfiniteRoundPlan(hexagonal, max_rounds=3)
        a = np.array([0.3])
        with pytest.raises(ProtocolError, match="max_rounds"):
            plan.exchange(a, 1.0 - a, -1)      # exactly on the diagonal: never settled by 3 bits
        # the scalar state machine enforces the same cap
        r = plan.rect(1, 1).rect
        on_diag = (r.xmin + 0.3 * r.width, r.ymin + 0.7 * r.height)
        with pytest.raises(ProtocolError):
            run_infinite_round(hexagonal, on_diag, ProtocolConfig("inf", max_rounds=3), plan)

    def test_dyadic_boundary_halts(self, hexagonal):
        plan = InfiniteRoundPlan(hexagonal)
        n, _, _ = plan.exchange(np.array([0.5, 0.25, 0.0]), np.array([0.5, 0.75, 0.0]), -1)
        assert np.all(n >= 1)

    def test_square(self, square):
        plan = InfiniteRoundPlan(square)
        assert not plan.error_rects
        x = _uniform(square, 1000, 8)
        _, res = run_batch(square, x, ProtocolConfig("inf"))
        assert np.all(res.bits == 0) and np.all(res.rounds == 1)


def test_bin_cap(pent):
    with pytest.raises(ProtocolError, match="exceed"):
        SingleRoundPlan(pent, config_from_rate(pent, 8.0, "21"))
