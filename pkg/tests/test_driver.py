"""Tests for participation factors and the iterative tightening driver."""

from dataclasses import replace

import numpy as np
import pytest

from ccopf import (
    UncertaintyMargins,
    compute_eta,
    participation_factors,
    solve_cc_acopf,
)
from ccopf.driver import ConvergenceCriteria, _eta_normalized


class TestParticipationFactors:
    def test_proportional_to_capacity(self, rts96m_net, rts96m_uspec):
        alpha = participation_factors(rts96m_net, rts96m_uspec)
        cap = np.array([g.p_max for g in rts96m_net.gens])
        assert alpha.sum() == pytest.approx(1.0)
        assert np.allclose(alpha, cap / cap.sum())
        # the synchronous condenser has no capacity and takes no share
        sync = next(g.idx for g in rts96m_net.gens if g.p_max == 0.0)
        assert alpha[sync] == 0.0

    def test_uniform_rule(self, rts96m_net, rts96m_uspec):
        spec = replace(rts96m_uspec, alpha_rule="uniform")
        alpha = participation_factors(rts96m_net, spec)
        disp = np.array([g.dispatchable for g in rts96m_net.gens])
        assert alpha.sum() == pytest.approx(1.0)
        assert np.allclose(alpha[disp], 1.0 / disp.sum())
        assert np.all(alpha[~disp] == 0.0)

    def test_explicit_list(self, rts96m_net, rts96m_uspec):
        ng = len(rts96m_net.gens)
        explicit = np.zeros(ng)
        explicit[0] = 0.4
        explicit[1] = 0.6
        spec = replace(rts96m_uspec, alpha_rule=explicit.tolist())
        alpha = participation_factors(rts96m_net, spec)
        assert np.array_equal(alpha, explicit)

    def test_explicit_must_sum_to_one(self, rts96m_net, rts96m_uspec):
        ng = len(rts96m_net.gens)
        spec = replace(rts96m_uspec, alpha_rule=[0.5] * ng)
        with pytest.raises(ValueError, match="sum to"):
            participation_factors(rts96m_net, spec)

    def test_explicit_length_check(self, rts96m_net, rts96m_uspec):
        spec = replace(rts96m_uspec, alpha_rule=[1.0])
        with pytest.raises(ValueError, match="entries"):
            participation_factors(rts96m_net, spec)

    def test_unknown_rule(self, rts96m_net, rts96m_uspec):
        spec = replace(rts96m_uspec, alpha_rule="by_cost")
        with pytest.raises(ValueError, match="unknown participation rule"):
            participation_factors(rts96m_net, spec)


class TestComputeEta:
    def test_units_and_maxima(self, rts96m_net):
        base = rts96m_net.base_mva
        old = UncertaintyMargins.zeros(rts96m_net)
        new = UncertaintyMargins.zeros(rts96m_net)
        new.lambda_p_u[2] = 0.013
        new.lambda_q_l[1] = 0.007
        new.lambda_v_u[5] = 2e-4
        new.lambda_i_u[7] = 0.05
        eta = compute_eta(rts96m_net, new, old)
        assert eta["p"] == pytest.approx(0.013 * base)
        assert eta["q"] == pytest.approx(0.007 * base)
        assert eta["v"] == pytest.approx(2e-4)
        assert eta["i"] == pytest.approx(0.05)

    def test_normalization_against_thresholds(self):
        crit = ConvergenceCriteria()
        eta = {"p": 0.0005, "q": 0.0002, "v": 5e-6, "i": 5e-4}
        assert _eta_normalized(eta, crit) == pytest.approx(0.5)
        eta["v"] = 2e-5
        assert _eta_normalized(eta, crit) == pytest.approx(2.0)


class TestIterativeSolve:
    def test_analytical_reference_run(self, rts96m_net, cc_analytical,
                                      rts96m_det_opf):
        report = cc_analytical
        assert report.engine == "analytical"
        assert report.converged
        assert report.n_iterations <= 8
        # first pass carries zero margins, so it solves the plain problem
        assert report.iterations[0].cost == pytest.approx(rts96m_det_opf.cost,
                                                          rel=1e-6)
        assert report.cost > rts96m_det_opf.cost
        # frozen regression value for this configuration
        assert report.cost == pytest.approx(39675.49, abs=2.0)

    def test_converged_margins_are_stationary(self, rts96m_net, cc_analytical):
        crit = ConvergenceCriteria()
        last = cc_analytical.iterations[-1].eta
        assert last["p"] <= crit.eta_p_mw
        assert last["q"] <= crit.eta_q_mvar
        assert last["v"] <= crit.eta_v
        assert last["i"] <= crit.eta_i

    def test_margins_match_solution_method(self, cc_analytical):
        assert cc_analytical.margins.method == "analytical"
        assert np.any(cc_analytical.margins.lambda_p_u > 0.0)

    def test_report_to_dict(self, cc_analytical):
        d = cc_analytical.to_dict()
        assert d["engine"] == "analytical"
        assert d["converged"] is True
        assert d["n_iterations"] == cc_analytical.n_iterations
        assert len(d["iterations"]) == d["n_iterations"]
        first = d["iterations"][0]
        assert {"k", "cost", "eta", "opf_iterations", "opf_status"} <= set(first)

    def test_dispatch_property(self, rts96m_net, cc_analytical):
        disp = cc_analytical.dispatch
        assert disp.p_g.shape == (len(rts96m_net.gens),)
        assert disp.v_bus.shape == (rts96m_net.n_bus,)

    def test_unknown_engine(self, rts96m_net, rts96m_adm, rts96m_uspec):
        with pytest.raises(ValueError, match="unknown margin engine"):
            solve_cc_acopf(rts96m_net, rts96m_adm, rts96m_uspec, engine="exact")

    def test_outer_iteration_budget_returns_best(self, rts96m_net, rts96m_adm,
                                                 rts96m_uspec):
        """An exhausted outer budget reports the best iterate, unconverged."""
        crit = ConvergenceCriteria(eta_p_mw=1e-12, eta_q_mvar=1e-12,
                                   eta_v=1e-15, eta_i=1e-13, max_outer=2)
        report = solve_cc_acopf(rts96m_net, rts96m_adm, rts96m_uspec,
                                criteria=crit)
        assert not report.converged
        assert report.n_iterations == 2
        assert report.solution is not None
        assert report.cost > 0.0

    def test_monte_carlo_close_to_analytical(self, cc_analytical, cc_monte_carlo):
        assert cc_monte_carlo.converged
        assert cc_monte_carlo.cost == pytest.approx(cc_analytical.cost, rel=0.03)

    def test_scenario_most_conservative(self, cc_analytical, cc_scenario):
        assert cc_scenario.converged
        assert cc_scenario.cost >= cc_analytical.cost
