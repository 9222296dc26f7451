"""Linearized response of monitored quantities to power injection deviations.

All factors are derivatives at a solved operating point: one LU factorization
of the reduced power-flow Jacobian, one right-hand side per uncertainty
source, then chain rules for generator reactive output, slack active output
and branch current magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .network import PQ, AdmittanceMatrix, NetworkCase, UncertaintySpec
from .powerflow import OperatingPoint, power_flow_jacobian


@dataclass
class SensitivityFactors:
    """Derivatives of monitored quantities with respect to each source's
    active-power deviation (columns ordered like the uncertainty sources)."""

    src_bus: np.ndarray
    alpha: np.ndarray  # participation factor per composite generator
    pq_buses: np.ndarray
    gamma_v: np.ndarray  # (n_pq, n_src) voltage magnitude response at PQ buses
    gamma_q: np.ndarray  # (n_gen, n_src) generator reactive output response
    gamma_p_slack: np.ndarray  # (n_src,) slack generator active output response
    gamma_i_f: np.ndarray  # (n_branch, n_src) from-end current response
    gamma_i_t: np.ndarray  # (n_branch, n_src) to-end current response

    def gamma_v_full(self, n_bus: int) -> np.ndarray:
        """Voltage response embedded over all buses (zero at held buses)."""
        out = np.zeros((n_bus, self.gamma_v.shape[1]))
        out[self.pq_buses] = self.gamma_v
        return out


def injection_perturbation(net: NetworkCase, uspec: UncertaintySpec, alpha: np.ndarray,
                           k: int) -> np.ndarray:
    """Schedule perturbation for a unit deviation of source k.

    Returned in full equation space (P rows for all buses, then Q rows):
    unit active injection at the source bus, participation-factor withdrawal
    at non-slack generator buses, and the power-factor-coupled reactive
    injection when the source sits at a PQ bus.
    """
    n = net.n_bus
    rhs = np.zeros(2 * n)
    s = uspec.src_bus[k]
    rhs[s] += 1.0
    for g, a in zip(net.gens, alpha):
        if g.bus != net.slack:
            rhs[g.bus] -= a
    if net.buses[s].btype == PQ:
        rhs[n + s] += uspec.gamma[k]
    return rhs


def compute_sensitivities(net: NetworkCase, adm: AdmittanceMatrix, op: OperatingPoint,
                          uspec: UncertaintySpec, alpha: np.ndarray) -> SensitivityFactors:
    """Response factors of all monitored quantities at an operating point."""
    n = net.n_bus
    n_src = uspec.n_src
    jac = power_flow_jacobian(net, adm, op.theta, op.v, op.p_inj, op.q_inj)
    lu = splu(jac.reduced.tocsc())

    rhs_full = np.column_stack(
        [injection_perturbation(net, uspec, alpha, k) for k in range(n_src)]
    )
    x_red = lu.solve(rhs_full[jac.row_keep])

    # state response embedded over (theta all buses, v all buses)
    x_full = np.zeros((2 * n, n_src))
    x_full[jac.col_keep] = x_red

    pq = net.pq_buses()
    gamma_v = x_full[n + pq]

    # generator reactive output: q_g = Q_bus(theta, v) + q_load_effective;
    # the source's own reactive deviation is served locally at its bus
    gamma_q = np.zeros((len(net.gens), n_src))
    for g in net.gens:
        row = jac.full[n + g.bus].toarray().ravel()
        gamma_q[g.idx] = row @ x_full
        at_bus = np.flatnonzero(uspec.src_bus == g.bus)
        gamma_q[g.idx, at_bus] -= uspec.gamma[at_bus]

    # slack active output: direct injections at the slack bus offset its unit
    row = jac.full[net.slack].toarray().ravel()
    gamma_p_slack = row @ x_full
    at_slack = np.flatnonzero(uspec.src_bus == net.slack)
    gamma_p_slack[at_slack] -= 1.0

    # branch currents: d|i| = Re(conj(i)/|i| di), with the phase pinned to
    # a fixed axis when the current is numerically zero
    V = op.v * np.exp(1j * op.theta)
    f, t = adm.f, adm.t
    ic_f = adm.yff * V[f] + adm.yft * V[t]
    ic_t = adm.ytf * V[f] + adm.ytt * V[t]

    dth = x_full[:n]
    dv = x_full[n:]

    def current_rows(ic: np.ndarray, y_own_f: np.ndarray, y_own_t: np.ndarray) -> np.ndarray:
        mag = np.abs(ic)
        u = np.where(mag >= 1e-6, np.conj(ic) / np.where(mag == 0, 1.0, mag), 1.0)
        d_dthf = np.real(u * 1j * y_own_f * V[f])
        d_dtht = np.real(u * 1j * y_own_t * V[t])
        d_dvf = np.real(u * y_own_f * np.exp(1j * op.theta[f]))
        d_dvt = np.real(u * y_own_t * np.exp(1j * op.theta[t]))
        return (
            d_dthf[:, None] * dth[f]
            + d_dtht[:, None] * dth[t]
            + d_dvf[:, None] * dv[f]
            + d_dvt[:, None] * dv[t]
        )

    gamma_i_f = current_rows(ic_f, adm.yff, adm.yft)
    gamma_i_t = current_rows(ic_t, adm.ytf, adm.ytt)

    return SensitivityFactors(
        src_bus=uspec.src_bus.copy(),
        alpha=np.asarray(alpha, dtype=float).copy(),
        pq_buses=pq,
        gamma_v=gamma_v,
        gamma_q=gamma_q,
        gamma_p_slack=gamma_p_slack,
        gamma_i_f=gamma_i_f,
        gamma_i_t=gamma_i_t,
    )


def check_sensitivities_fd(net: NetworkCase, adm: AdmittanceMatrix, dispatch,
                           uspec: UncertaintySpec, alpha: np.ndarray,
                           h: float = 1e-4, rel_tol: float = 1e-3) -> dict:
    """Validate factors against central finite differences of full re-solves.

    Each source is perturbed by +/- h (p.u.), the power flow re-solved, and
    the derivative of every monitored quantity compared against the
    analytical factor. Relative errors use a floor of 1e-6 on the reference
    magnitude so near-zero factors compare absolutely.
    """
    from .validation import apply_response, monitored_quantities
    from .powerflow import solve_power_flow

    base_schedule = dispatch.schedule(net)
    op0 = solve_power_flow(net, adm, base_schedule)
    if not op0.converged:
        raise RuntimeError("base power flow did not converge")
    sens = compute_sensitivities(net, adm, op0, uspec, alpha)

    n_src = uspec.n_src
    floor = 1e-6
    rows = []
    max_rel = {"v": 0.0, "q": 0.0, "p_slack": 0.0, "i": 0.0}
    for k in range(n_src):
        omega = np.zeros(n_src)
        vals = {}
        for sign in (+1.0, -1.0):
            omega[k] = sign * h
            sched = apply_response(net, dispatch, uspec, alpha, omega)
            op = solve_power_flow(net, adm, sched, start=op0)
            if not op.converged:
                raise RuntimeError(f"perturbed power flow diverged for source {k}")
            vals[sign] = monitored_quantities(net, adm, uspec, op, omega)
        omega[k] = 0.0

        def fd(name):
            return (vals[1.0][name] - vals[-1.0][name]) / (2 * h)

        def rel(a_fd, a_an):
            return np.abs(a_fd - a_an) / np.maximum(np.abs(a_an), floor)

        rv = rel(fd("v_pq"), sens.gamma_v[:, k])
        rq = rel(fd("q_gen"), sens.gamma_q[:, k])
        rp = rel(fd("p_slack"), sens.gamma_p_slack[k])
        ri = max(
            rel(fd("i_f"), sens.gamma_i_f[:, k]).max(initial=0.0),
            rel(fd("i_t"), sens.gamma_i_t[:, k]).max(initial=0.0),
        )
        max_rel["v"] = max(max_rel["v"], float(rv.max(initial=0.0)))
        max_rel["q"] = max(max_rel["q"], float(rq.max(initial=0.0)))
        max_rel["p_slack"] = max(max_rel["p_slack"], float(rp))
        max_rel["i"] = max(max_rel["i"], float(ri))
        rows.append(
            {
                "source": int(uspec.src_bus[k]),
                "rel_v": float(rv.max(initial=0.0)),
                "rel_q": float(rq.max(initial=0.0)),
                "rel_p_slack": float(rp),
                "rel_i": float(ri),
            }
        )

    worst = max(max_rel.values())
    return {
        "rows": rows,
        "max_rel": max_rel,
        "worst": worst,
        "passed": worst <= rel_tol,
        "step": h,
        "rel_tol": rel_tol,
    }
