"""Tests for operating-point sensitivities of monitored quantities."""

from dataclasses import replace

import numpy as np
import pytest

from ccopf import (
    build_admittance,
    build_network,
    case_dispatch,
    check_sensitivities_fd,
    compute_sensitivities,
    derive_stochastic_case,
    participation_factors,
    solve_power_flow,
)
from ccopf.sensitivity import injection_perturbation


@pytest.fixture(scope="module")
def rts96m_point(rts96m_net, rts96m_adm):
    disp = case_dispatch(rts96m_net)
    op = solve_power_flow(rts96m_net, rts96m_adm, disp.schedule(rts96m_net))
    assert op.converged
    return disp, op


class TestInjectionPerturbation:
    def test_unit_source_and_withdrawal(self, rts96m_net, rts96m_uspec, rts96m_alpha):
        net, spec, alpha = rts96m_net, rts96m_uspec, rts96m_alpha
        rhs = injection_perturbation(net, spec, alpha, 0)
        n = net.n_bus
        src = spec.src_bus[0]
        gen_buses = {g.bus: g.idx for g in net.gens}
        for b in range(n):
            expect = (1.0 if b == src else 0.0)
            if b in gen_buses and b != net.slack:
                expect -= alpha[gen_buses[b]]
            assert rhs[b] == pytest.approx(expect)
        if net.buses[src].btype == 1:
            assert rhs[n + src] == pytest.approx(spec.gamma[0])

    def test_balance(self, rts96m_net, rts96m_uspec, rts96m_alpha):
        """Active perturbation sums to the slack generator's share."""
        net = rts96m_net
        slack_gen = next(g for g in net.gens if g.bus == net.slack)
        for k in (0, 5, 16):
            rhs = injection_perturbation(net, rts96m_uspec, rts96m_alpha, k)
            assert rhs[: net.n_bus].sum() == pytest.approx(
                rts96m_alpha[slack_gen.idx], abs=1e-12)


class TestFiniteDifferenceAgreement:
    def test_rts96_at_case_dispatch(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                    rts96m_alpha, rts96m_point):
        disp, _ = rts96m_point
        res = check_sensitivities_fd(rts96m_net, rts96m_adm, disp,
                                     rts96m_uspec, rts96m_alpha)
        assert res["passed"], res["max_rel"]
        assert res["worst"] <= 1e-3
        for cat in ("v", "q", "p_slack", "i"):
            assert res["max_rel"][cat] <= 1e-3

    def test_voltage_factor_direct_fd(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                      rts96m_alpha, rts96m_point):
        """Spot-check one voltage factor against a hand finite difference."""
        from ccopf.validation import apply_response

        net, adm, spec = rts96m_net, rts96m_adm, rts96m_uspec
        disp, op = rts96m_point
        sens = compute_sensitivities(net, adm, op, spec, rts96m_alpha)
        k = 3
        h = 1e-4
        e = np.zeros(spec.n_src)
        e[k] = h
        up = solve_power_flow(net, adm, apply_response(net, disp, spec, rts96m_alpha, e),
                              start=op)
        dn = solve_power_flow(net, adm, apply_response(net, disp, spec, rts96m_alpha, -e),
                              start=op)
        fd = (up.v[net.pq_buses()] - dn.v[net.pq_buses()]) / (2 * h)
        worst = np.abs(sens.gamma_v[:, k] - fd).max()
        assert worst <= 1e-3 * max(1.0, np.abs(fd).max())


@pytest.fixture(scope="module")
def lossless(rts96_raw, cases_dir):
    """Same case with all series resistance and shunt conductance removed."""
    from ccopf import bind_uncertainty, load_recipe, parse_uncertainty

    raw = derive_stochastic_case(rts96_raw, load_recipe(cases_dir / "recipe_x15.json"))
    raw = raw.copy()
    raw.branch[:, 2] = 0.0
    raw.bus[:, 4] = 0.0
    net = build_network(raw)
    adm = build_admittance(net)
    usf = parse_uncertainty(cases_dir / "rts96_uncertainty.json")
    spec = bind_uncertainty(net, usf)
    return net, adm, spec


class TestLosslessIdentities:
    def test_slack_factor_is_minus_alpha(self, lossless):
        """Without losses the slack picks up exactly its participation share."""
        net, adm, spec = lossless
        alpha = participation_factors(net, spec)
        disp = case_dispatch(net)
        op = solve_power_flow(net, adm, disp.schedule(net))
        assert op.converged
        sens = compute_sensitivities(net, adm, op, spec, alpha)
        slack_gen = next(g for g in net.gens if g.bus == net.slack)
        assert np.allclose(sens.gamma_p_slack, -alpha[slack_gen.idx], atol=1e-8)


class TestFactorShapes:
    def test_shapes_and_embedding(self, rts96m_net, rts96m_adm, rts96m_uspec,
                                  rts96m_alpha, rts96m_point):
        net, spec = rts96m_net, rts96m_uspec
        _, op = rts96m_point
        sens = compute_sensitivities(net, rts96m_adm, op, spec, rts96m_alpha)
        n_pq = len(net.pq_buses())
        assert sens.gamma_v.shape == (n_pq, spec.n_src)
        assert sens.gamma_q.shape == (len(net.gens), spec.n_src)
        assert sens.gamma_p_slack.shape == (spec.n_src,)
        assert sens.gamma_i_f.shape == (len(net.branches), spec.n_src)
        full = sens.gamma_v_full(net.n_bus)
        held = np.flatnonzero(net.bus_types != 1)
        assert np.all(full[held] == 0.0)
        assert np.allclose(full[net.pq_buses()], sens.gamma_v)

    def test_scaling_in_uncertainty_magnitude(self, rts96m_net, rts96m_adm,
                                              rts96m_uspec, rts96m_alpha,
                                              rts96m_point):
        """Factors describe the operating point; covariance does not enter."""
        _, op = rts96m_point
        spec2 = replace(rts96m_uspec, sigma=4.0 * rts96m_uspec.sigma)
        s1 = compute_sensitivities(rts96m_net, rts96m_adm, op, rts96m_uspec, rts96m_alpha)
        s2 = compute_sensitivities(rts96m_net, rts96m_adm, op, spec2, rts96m_alpha)
        assert np.allclose(s1.gamma_v, s2.gamma_v)
        assert np.allclose(s1.gamma_p_slack, s2.gamma_p_slack)
