"""Tests for the three margin engines and their shared arithmetic."""

import math

import numpy as np
import pytest

from ccopf import (
    MarginSamplingError,
    UncertaintyMargins,
    analytical_margins,
    case_dispatch,
    compute_sensitivities,
    monte_carlo_margins,
    quantile_multiplier,
    scenario_margins,
    scenario_sample_count,
    sigma_omega,
    solve_power_flow,
    sqrt_psd,
    write_margins_csv,
)
from ccopf.margins import _order_indices, decision_dimension, margin_records


def normal_quantile_reference(p, tol=1e-12):
    """Standard normal quantile by bisection on the erf-based CDF."""
    def cdf(x):
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    lo, hi = -10.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture(scope="module")
def rts96m_base(rts96m_net, rts96m_adm, rts96m_uspec, rts96m_alpha):
    disp = case_dispatch(rts96m_net)
    op = solve_power_flow(rts96m_net, rts96m_adm, disp.schedule(rts96m_net))
    assert op.converged
    return disp, op


class TestQuantileMultiplier:
    def test_gaussian_against_bisection_oracle(self):
        for eps in (0.01, 0.05, 0.1, 0.25):
            ref = normal_quantile_reference(1.0 - eps)
            assert quantile_multiplier(eps, "gaussian") == pytest.approx(ref, abs=1e-9)

    def test_gaussian_one_percent(self):
        assert quantile_multiplier(0.01) == pytest.approx(2.32635, abs=1e-5)

    def test_chebyshev_closed_form(self):
        assert quantile_multiplier(0.01, "chebyshev") == pytest.approx(9.94987, abs=1e-5)
        assert quantile_multiplier(0.1, "chebyshev") == pytest.approx(3.0)

    def test_chebyshev_dominates_gaussian(self):
        for eps in (0.01, 0.05, 0.1, 0.3, 0.49):
            assert quantile_multiplier(eps, "chebyshev") > quantile_multiplier(eps, "gaussian")

    def test_eps_domain(self):
        with pytest.raises(ValueError, match="eps"):
            quantile_multiplier(0.0)
        with pytest.raises(ValueError, match="eps"):
            quantile_multiplier(0.5)

    def test_unknown_model(self):
        with pytest.raises(ValueError, match="unknown quantile model"):
            quantile_multiplier(0.01, "uniform")


class TestSigmaOmega:
    def test_hand_computed(self):
        sigma = np.array([[0.01, 0.005], [0.005, 0.04]])
        assert sigma_omega(sigma) == pytest.approx(math.sqrt(0.06))

    def test_independent_sources_add_in_quadrature(self):
        sigma = np.diag([0.04, 0.09])
        assert sigma_omega(sigma) == pytest.approx(math.sqrt(0.13))


class TestOrderIndices:
    def test_conventions(self):
        # 1000 samples at the 1% tail: 10th largest and 10th smallest
        assert _order_indices(1000, 0.01) == (990, 9)
        assert _order_indices(1000, 0.1) == (900, 99)
        # fractional counts round the tail up
        assert _order_indices(1000, 0.0105) == (989, 10)

    def test_worst_case_at_tiny_eps(self):
        n = 100
        k = math.ceil(1e-6 * n)
        assert k == 1
        assert _order_indices(n, 1e-6) == (n - 1, 0)


class TestAnalyticalMargins:
    def test_symmetric_margins(self, rts96m_net, rts96m_adm, rts96m_uspec,
                               rts96m_alpha, rts96m_base):
        _, op = rts96m_base
        m = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        assert m.method == "analytical"
        assert np.allclose(m.lambda_p_u, m.lambda_p_l)
        assert np.allclose(m.lambda_q_u, m.lambda_q_l)
        assert np.allclose(m.lambda_v_u, m.lambda_v_l)
        assert np.allclose(m.lambda_i_u, m.lambda_i_l)

    def test_nonnegative(self, rts96m_net, rts96m_adm, rts96m_uspec,
                         rts96m_alpha, rts96m_base):
        _, op = rts96m_base
        m = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        for arr in (m.lambda_p_u, m.lambda_q_u, m.lambda_v_u, m.lambda_i_u):
            assert np.all(arr >= 0.0)

    def test_active_margin_formula(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                   rts96m_alpha, rts96m_base):
        """Non-slack active margins are the participation share of the
        total-deviation quantile; the slack margin comes from its factors."""
        net, spec, alpha = rts96m_net, rts96m_uspec, rts96m_alpha
        _, op = rts96m_base
        m = analytical_margins(net, rts96m_adm, op, spec, alpha)
        mult = quantile_multiplier(spec.epsilons.eps_p, spec.quantile_model)
        s_om = sigma_omega(spec.sigma)
        slack_gen = next(g.idx for g in net.gens if g.bus == net.slack)
        for g in net.gens:
            if g.idx == slack_gen:
                continue
            assert m.lambda_p_u[g.idx] == pytest.approx(alpha[g.idx] * mult * s_om)
        sens = compute_sensitivities(net, rts96m_adm, op, spec, alpha)
        expect = mult * np.linalg.norm(sqrt_psd(spec.sigma) @ sens.gamma_p_slack)
        assert m.lambda_p_u[slack_gen] == pytest.approx(expect)

    def test_voltage_margin_row_norms(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                      rts96m_alpha, rts96m_base):
        net, spec, alpha = rts96m_net, rts96m_uspec, rts96m_alpha
        _, op = rts96m_base
        m = analytical_margins(net, rts96m_adm, op, spec, alpha)
        sens = compute_sensitivities(net, rts96m_adm, op, spec, alpha)
        mult = quantile_multiplier(spec.epsilons.eps_v, spec.quantile_model)
        sroot = sqrt_psd(spec.sigma)
        pq = net.pq_buses()
        for row, bus in enumerate(pq):
            expect = mult * np.linalg.norm(sroot @ sens.gamma_v[row])
            assert m.lambda_v_u[bus] == pytest.approx(expect, abs=1e-12)
        held = np.flatnonzero(net.bus_types != 1)
        assert np.all(m.lambda_v_u[held] == 0.0)

    def test_scales_with_uncertainty(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                     rts96m_alpha, rts96m_base):
        """Doubling every standard deviation doubles every margin."""
        from dataclasses import replace

        _, op = rts96m_base
        m1 = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        spec2 = replace(rts96m_uspec, sigma=4.0 * rts96m_uspec.sigma)
        m2 = analytical_margins(rts96m_net, rts96m_adm, op, spec2, rts96m_alpha)
        assert np.allclose(m2.lambda_p_u, 2.0 * m1.lambda_p_u)
        assert np.allclose(m2.lambda_v_u, 2.0 * m1.lambda_v_u, atol=1e-12)
        assert np.allclose(m2.lambda_i_u, 2.0 * m1.lambda_i_u, atol=1e-12)


class TestMonteCarloMargins:
    def test_sample_size_precondition(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                      rts96m_alpha, rts96m_base):
        disp, _ = rts96m_base
        with pytest.raises(MarginSamplingError, match="cannot resolve"):
            monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                rts96m_alpha, n=500)

    def test_margins_nonnegative_and_shaped(self, rts96m_net, rts96m_adm,
                                            rts96m_uspec, rts96m_alpha, rts96m_base):
        disp, _ = rts96m_base
        m = monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                rts96m_alpha, n=1000, seed=3)
        assert m.method == "monte_carlo"
        assert m.lambda_p_u.shape == (len(rts96m_net.gens),)
        assert m.lambda_v_u.shape == (rts96m_net.n_bus,)
        assert m.lambda_i_u.shape == (len(rts96m_net.branches),)
        for arr in (m.lambda_p_u, m.lambda_p_l, m.lambda_q_u, m.lambda_q_l,
                    m.lambda_v_u, m.lambda_v_l, m.lambda_i_u, m.lambda_i_l):
            assert np.all(arr >= 0.0)

    def test_deterministic_given_seed(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                      rts96m_alpha, rts96m_base):
        disp, _ = rts96m_base
        m1 = monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                 rts96m_alpha, n=1000, seed=3)
        m2 = monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                 rts96m_alpha, n=1000, seed=3, threads=2)
        diff = m1.max_abs_diff(m2)
        assert max(diff.values()) == 0.0

    def test_roughly_tracks_analytical(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                       rts96m_alpha, rts96m_base):
        """Sampled and linearized margins agree on the dominant entries."""
        disp, op = rts96m_base
        ana = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        mc = monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                 rts96m_alpha, n=1000, seed=3)
        big = ana.lambda_p_u > 0.5 * ana.lambda_p_u.max()
        ratio = mc.lambda_p_u[big] / ana.lambda_p_u[big]
        assert np.all(ratio > 0.7)
        assert np.all(ratio < 1.3)


class TestScenarioMargins:
    def test_sample_count_formula(self):
        n_x = 114
        expect = math.ceil((2.0 / 0.1) * (math.log(1e4) + n_x))
        assert scenario_sample_count(0.1, 1e-4, n_x) == expect == 2465

    def test_sample_count_domain(self):
        with pytest.raises(ValueError, match="eps_joint"):
            scenario_sample_count(0.0, 1e-4, 10)
        with pytest.raises(ValueError, match="beta"):
            scenario_sample_count(0.1, 0.0, 10)

    def test_decision_dimension(self, rts96m_net, ieee118m_net):
        assert decision_dimension(rts96m_net) == 2 * 24 + 2 * 33 == 114
        assert decision_dimension(ieee118m_net) == 2 * 118 + 2 * 54

    def test_dominates_monte_carlo(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                   rts96m_alpha, rts96m_base):
        """With a common seed the scenario batch contains the whole
        Monte-Carlo batch, so the worst case dominates every tail."""
        disp, _ = rts96m_base
        mc = monte_carlo_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                                 rts96m_alpha, n=1000, seed=5)
        sc = scenario_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                              rts96m_alpha, seed=5)
        tol = 1e-12
        for a, b in [(sc.lambda_p_u, mc.lambda_p_u), (sc.lambda_p_l, mc.lambda_p_l),
                     (sc.lambda_q_u, mc.lambda_q_u), (sc.lambda_q_l, mc.lambda_q_l),
                     (sc.lambda_v_u, mc.lambda_v_u), (sc.lambda_v_l, mc.lambda_v_l),
                     (sc.lambda_i_u, mc.lambda_i_u), (sc.lambda_i_l, mc.lambda_i_l)]:
            assert np.all(a >= b - tol)

    def test_explicit_scenario_count(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                     rts96m_alpha, rts96m_base):
        disp, _ = rts96m_base
        m = scenario_margins(rts96m_net, rts96m_adm, disp, rts96m_uspec,
                             rts96m_alpha, n_scenarios=200, seed=5)
        assert m.method == "scenario"
        assert np.all(m.lambda_p_u >= 0.0)


class TestMarginContainer:
    def test_zeros_and_diff(self, rts96m_net):
        a = UncertaintyMargins.zeros(rts96m_net)
        b = UncertaintyMargins.zeros(rts96m_net)
        b.lambda_p_u[0] = 0.25
        b.lambda_v_l[3] = 0.01
        d = a.max_abs_diff(b)
        assert d["p"] == pytest.approx(0.25)
        assert d["v"] == pytest.approx(0.01)
        assert d["q"] == 0.0
        assert d["i"] == 0.0


class TestMarginRecords:
    def test_rows_and_units(self, rts96m_net, rts96m_adm, rts96m_uspec,
                            rts96m_alpha, rts96m_base):
        _, op = rts96m_base
        m = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        rows = margin_records(rts96m_net, m)
        n_gen = len(rts96m_net.gens)
        n_pq = len(rts96m_net.pq_buses())
        assert len(rows) == 2 * n_gen + n_pq + len(rts96m_net.branches)
        units = {r["category"]: r["unit"] for r in rows}
        assert units == {"p": "MW", "q": "MVAr", "v": "p.u.", "i": "p.u."}
        p_rows = [r for r in rows if r["category"] == "p"]
        base = rts96m_net.base_mva
        assert p_rows[0]["lambda_upper"] == pytest.approx(m.lambda_p_u[0] * base)

    def test_csv_round_trip(self, tmp_path, rts96m_net, rts96m_adm, rts96m_uspec,
                            rts96m_alpha, rts96m_base):
        import csv

        _, op = rts96m_base
        m = analytical_margins(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        path = tmp_path / "margins.csv"
        write_margins_csv(path, rts96m_net, m)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(margin_records(rts96m_net, m))
        assert {"id", "category", "unit", "lambda_lower", "lambda_upper"} <= set(rows[0])
        ref = margin_records(rts96m_net, m)[0]
        assert float(rows[0]["lambda_upper"]) == pytest.approx(ref["lambda_upper"], rel=1e-9)
