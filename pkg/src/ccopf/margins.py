"""Uncertainty margins for generator, voltage and current limits.

Three interchangeable engines compute the amount by which each operating
limit must be tightened so that the constraint holds with probability
1 - epsilon under the injection uncertainty:

* analytical: linearized propagation of the deviation covariance through
  power-flow sensitivity factors, scaled by a Gaussian or Chebyshev
  quantile multiplier;
* monte_carlo: empirical order statistics of re-solved power flows;
* scenario: worst case over a sample whose size carries an a-priori
  joint-probability guarantee.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .network import (
    AdmittanceMatrix,
    NetworkCase,
    UncertaintySpec,
    gamma_from_power_factor,
    sqrt_psd,
)
from .powerflow import Dispatch, OperatingPoint, slack_gen_p, solve_power_flow
from .sensitivity import compute_sensitivities
from .validation import ResponseSamples, response_samples, sample_omega
from . import kernels

__all__ = [
    "UncertaintyMargins",
    "MarginSamplingError",
    "analytical_margins",
    "monte_carlo_margins",
    "scenario_margins",
    "scenario_sample_count",
    "sigma_omega",
    "quantile_multiplier",
    "gamma_from_power_factor",
    "sqrt_psd",
    "write_margins_csv",
]

SCENARIO_BETA = 1e-4


class MarginSamplingError(RuntimeError):
    """Raised when a sampling-based margin engine cannot produce margins."""


def sigma_omega(sigma: np.ndarray) -> float:
    """Standard deviation of the total deviation (sum over all sources)."""
    one = np.ones(sigma.shape[0])
    return float(np.sqrt(one @ sigma @ one))


def quantile_multiplier(eps: float, model: str = "gaussian") -> float:
    """Multiplier turning a standard deviation into a 1-eps margin.

    "gaussian" uses the standard normal quantile; "chebyshev" uses the
    distribution-free bound sqrt((1-eps)/eps).
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    if model == "gaussian":
        return float(stats.norm.ppf(1.0 - eps))
    if model == "chebyshev":
        return math.sqrt((1.0 - eps) / eps)
    raise ValueError(f"unknown quantile model {model!r}")


@dataclass
class UncertaintyMargins:
    """Per-constraint tightening amounts, upper and lower, in p.u.

    Voltage entries are nonzero only at load buses; current lower margins
    exist for symmetry but no lower current limit uses them.
    """

    lambda_p_u: np.ndarray  # (n_gen,)
    lambda_p_l: np.ndarray
    lambda_q_u: np.ndarray  # (n_gen,)
    lambda_q_l: np.ndarray
    lambda_v_u: np.ndarray  # (n_bus,)
    lambda_v_l: np.ndarray
    lambda_i_u: np.ndarray  # (n_branch,)
    lambda_i_l: np.ndarray
    method: str = "none"

    @classmethod
    def zeros(cls, net: NetworkCase) -> "UncertaintyMargins":
        n_gen, n_bus, n_br = len(net.gens), net.n_bus, len(net.branches)
        return cls(
            lambda_p_u=np.zeros(n_gen), lambda_p_l=np.zeros(n_gen),
            lambda_q_u=np.zeros(n_gen), lambda_q_l=np.zeros(n_gen),
            lambda_v_u=np.zeros(n_bus), lambda_v_l=np.zeros(n_bus),
            lambda_i_u=np.zeros(n_br), lambda_i_l=np.zeros(n_br),
        )

    def max_abs_diff(self, other: "UncertaintyMargins") -> dict:
        """Largest change per category between two margin sets, p.u."""
        def pair(a_u, a_l, b_u, b_l):
            du = np.abs(a_u - b_u).max(initial=0.0)
            dl = np.abs(a_l - b_l).max(initial=0.0)
            return float(max(du, dl))

        return {
            "p": pair(self.lambda_p_u, self.lambda_p_l, other.lambda_p_u, other.lambda_p_l),
            "q": pair(self.lambda_q_u, self.lambda_q_l, other.lambda_q_u, other.lambda_q_l),
            "v": pair(self.lambda_v_u, self.lambda_v_l, other.lambda_v_u, other.lambda_v_l),
            "i": pair(self.lambda_i_u, self.lambda_i_l, other.lambda_i_u, other.lambda_i_l),
        }


def analytical_margins(net: NetworkCase, adm: AdmittanceMatrix, op: OperatingPoint,
                       uspec: UncertaintySpec, alpha: np.ndarray) -> UncertaintyMargins:
    """Margins from linearized sensitivities and a quantile multiplier.

    Each margin is the multiplier times the standard deviation of the
    linearized constraint quantity. Upper and lower margins coincide.
    """
    sens = compute_sensitivities(net, adm, op, uspec, alpha)
    sroot = sqrt_psd(uspec.sigma)
    s_om = sigma_omega(uspec.sigma)
    eps = uspec.epsilons
    model = uspec.quantile_model
    m_p = quantile_multiplier(eps.eps_p, model)
    m_q = quantile_multiplier(eps.eps_q, model)
    m_v = quantile_multiplier(eps.eps_v, model)
    m_i = quantile_multiplier(eps.eps_i, model)

    out = UncertaintyMargins.zeros(net)
    out.method = "analytical"

    for gi, g in enumerate(net.gens):
        if g.bus == net.slack:
            lam = m_p * float(np.linalg.norm(sroot @ sens.gamma_p_slack))
        else:
            lam = m_p * float(alpha[gi]) * s_om
        out.lambda_p_u[gi] = out.lambda_p_l[gi] = lam
        lam_q = m_q * float(np.linalg.norm(sroot @ sens.gamma_q[gi]))
        out.lambda_q_u[gi] = out.lambda_q_l[gi] = lam_q

    for j, b in enumerate(sens.pq_buses):
        lam = m_v * float(np.linalg.norm(sroot @ sens.gamma_v[j]))
        out.lambda_v_u[b] = out.lambda_v_l[b] = lam

    i_f, i_t = kernels.currents(adm, op.theta, op.v)
    for br in net.branches:
        row = sens.gamma_i_f[br.idx] if i_f[br.idx] >= i_t[br.idx] else sens.gamma_i_t[br.idx]
        lam = m_i * float(np.linalg.norm(sroot @ row))
        out.lambda_i_u[br.idx] = out.lambda_i_l[br.idx] = lam
    return out


def _order_indices(n: int, eps: float) -> tuple[int, int]:
    """0-based ascending order-statistic indices for the upper and lower tails."""
    k = math.ceil(eps * n)
    return n - k, k - 1


def _base_quantities(net: NetworkCase, adm: AdmittanceMatrix,
                     dispatch: Dispatch) -> tuple[OperatingPoint, dict]:
    op = solve_power_flow(net, adm, dispatch.schedule(net))
    if not op.converged:
        raise MarginSamplingError("base-point power flow did not converge")
    p0 = np.asarray(dispatch.p_g, dtype=float).copy()
    slack_gen = next(i for i, g in enumerate(net.gens) if g.bus == net.slack)
    p0[slack_gen] = slack_gen_p(net, op)
    q0 = np.array([op.q_inj[g.bus] + net.qd[g.bus] for g in net.gens])
    i_f, i_t = kernels.currents(adm, op.theta, op.v)
    return op, {
        "p_gen": p0,
        "q_gen": q0,
        "v_pq": op.v[net.pq_buses()],
        "i_flow": np.maximum(i_f, i_t),
    }


def _empirical_margins(net: NetworkCase, rs: ResponseSamples, base: dict,
                       indices: dict, method: str) -> UncertaintyMargins:
    """Margins from per-sample quantities and tail indices.

    indices maps category to (upper, lower) 0-based positions in the
    ascending sort; (n-1, 0) reproduces the worst case.
    """
    ok = ~rs.diverged
    out = UncertaintyMargins.zeros(net)
    out.method = method

    def tails(values: np.ndarray, cat: str, base_val: float) -> tuple[float, float]:
        iu, il = indices[cat]
        srt = np.sort(values)
        up = max(float(srt[iu] - base_val), 0.0)
        lo = max(float(base_val - srt[il]), 0.0)
        return up, lo

    for gi in range(len(net.gens)):
        up, lo = tails(rs.p_gen[ok, gi], "p", base["p_gen"][gi])
        out.lambda_p_u[gi], out.lambda_p_l[gi] = up, lo
        up, lo = tails(rs.q_gen[ok, gi], "q", base["q_gen"][gi])
        out.lambda_q_u[gi], out.lambda_q_l[gi] = up, lo
    for j, b in enumerate(net.pq_buses()):
        up, lo = tails(rs.v_pq[ok, j], "v", base["v_pq"][j])
        out.lambda_v_u[b], out.lambda_v_l[b] = up, lo
    flow = np.maximum(rs.i_f, rs.i_t)
    for br in net.branches:
        up, lo = tails(flow[ok, br.idx], "i", base["i_flow"][br.idx])
        out.lambda_i_u[br.idx], out.lambda_i_l[br.idx] = up, lo
    return out


def monte_carlo_margins(net: NetworkCase, adm: AdmittanceMatrix, dispatch: Dispatch,
                        uspec: UncertaintySpec, alpha: np.ndarray, n: int = 1000,
                        threads: int | None = None,
                        seed: int | None = None) -> UncertaintyMargins:
    """Margins from empirical tail order statistics of n re-solved states.

    Requires n >= 10 / min(eps) so the tail index is supported by at
    least ten samples; any diverged sample aborts.
    """
    eps = uspec.epsilons
    eps_min = min(eps.eps_p, eps.eps_q, eps.eps_v, eps.eps_i)
    if n < 10.0 / eps_min:
        raise MarginSamplingError(
            f"{n} samples cannot resolve the {eps_min} tail; need at least "
            f"{math.ceil(10.0 / eps_min)}"
        )
    op, base = _base_quantities(net, adm, dispatch)
    batch = sample_omega(uspec, n, "gaussian",
                         seed=uspec.seed if seed is None else seed)
    rs = response_samples(net, adm, dispatch, uspec, alpha, batch, threads)
    n_div = int(rs.diverged.sum())
    if n_div:
        raise MarginSamplingError(f"{n_div} of {n} sampled power flows diverged")
    indices = {
        "p": _order_indices(n, eps.eps_p),
        "q": _order_indices(n, eps.eps_q),
        "v": _order_indices(n, eps.eps_v),
        "i": _order_indices(n, eps.eps_i),
    }
    return _empirical_margins(net, rs, base, indices, "monte_carlo")


def scenario_sample_count(eps_joint: float, beta: float, n_x: int) -> int:
    """Scenario count giving a 1-beta guarantee on joint probability eps_joint."""
    if not 0.0 < eps_joint < 1.0:
        raise ValueError(f"eps_joint must lie in (0, 1), got {eps_joint}")
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return math.ceil((2.0 / eps_joint) * (math.log(1.0 / beta) + n_x))


def decision_dimension(net: NetworkCase) -> int:
    """Decision-variable count used for the scenario guarantee.

    Two state variables per bus plus an active and reactive set-point per
    in-service unit.
    """
    return 2 * net.n_bus + 2 * net.n_units_in_service


def scenario_margins(net: NetworkCase, adm: AdmittanceMatrix, dispatch: Dispatch,
                     uspec: UncertaintySpec, alpha: np.ndarray,
                     n_scenarios: int | None = None, beta: float = SCENARIO_BETA,
                     threads: int | None = None,
                     seed: int | None = None) -> UncertaintyMargins:
    """Worst-case margins over a probabilistically sized scenario batch."""
    if n_scenarios is None:
        n_scenarios = scenario_sample_count(uspec.epsilons.eps_joint, beta,
                                            decision_dimension(net))
    op, base = _base_quantities(net, adm, dispatch)
    batch = sample_omega(uspec, n_scenarios, "gaussian",
                         seed=uspec.seed if seed is None else seed)
    rs = response_samples(net, adm, dispatch, uspec, alpha, batch, threads)
    n_div = int(rs.diverged.sum())
    if n_div:
        raise MarginSamplingError(
            f"{n_div} of {n_scenarios} scenario power flows diverged"
        )
    worst = {cat: (n_scenarios - 1, 0) for cat in ("p", "q", "v", "i")}
    return _empirical_margins(net, rs, base, worst, "scenario")


def margin_records(net: NetworkCase, margins: UncertaintyMargins) -> list[dict]:
    """Flat per-constraint margin rows in natural units (MW, MVAr, p.u.)."""
    base = net.base_mva
    rows: list[dict] = []
    for gi, g in enumerate(net.gens):
        rows.append({"id": f"p:bus{net.buses[g.bus].id}", "category": "p",
                     "unit": "MW",
                     "lambda_lower": margins.lambda_p_l[gi] * base,
                     "lambda_upper": margins.lambda_p_u[gi] * base})
    for gi, g in enumerate(net.gens):
        rows.append({"id": f"q:bus{net.buses[g.bus].id}", "category": "q",
                     "unit": "MVAr",
                     "lambda_lower": margins.lambda_q_l[gi] * base,
                     "lambda_upper": margins.lambda_q_u[gi] * base})
    for b in net.pq_buses():
        rows.append({"id": f"v:bus{net.buses[b].id}", "category": "v",
                     "unit": "p.u.",
                     "lambda_lower": margins.lambda_v_l[b],
                     "lambda_upper": margins.lambda_v_u[b]})
    for br in net.branches:
        if not np.isfinite(br.i_max):
            continue
        rows.append({
            "id": f"i:branch{br.idx}:{net.buses[br.f].id}-{net.buses[br.t].id}",
            "category": "i", "unit": "p.u.",
            "lambda_lower": margins.lambda_i_l[br.idx],
            "lambda_upper": margins.lambda_i_u[br.idx],
        })
    return rows


def write_margins_csv(path, net: NetworkCase, margins: UncertaintyMargins) -> None:
    """Write one row per monitored constraint with its tightening amounts."""
    rows = margin_records(net, margins)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["id", "category", "unit", "lambda_lower", "lambda_upper"]
        )
        writer.writeheader()
        for row in rows:
            row = dict(row)
            row["lambda_lower"] = f"{row['lambda_lower']:.10g}"
            row["lambda_upper"] = f"{row['lambda_upper']:.10g}"
            writer.writerow(row)
