"""Iterative chance-constrained AC OPF driver.

Alternates between a deterministic OPF under tightened limits and a
margin recomputation at the new operating point, until the margins stop
changing. Starts from zero margins, warm-starts each OPF from the
previous solution, and on non-convergence returns the iterate whose
margin change was smallest relative to the stopping thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acopf import OPFSolution, solve_acopf, tighten_bounds
from .margins import (
    UncertaintyMargins,
    analytical_margins,
    monte_carlo_margins,
    scenario_margins,
)
from .network import AdmittanceMatrix, NetworkCase, UncertaintySpec
from .powerflow import Dispatch, solve_power_flow

ENGINES = ("analytical", "monte_carlo", "scenario")


@dataclass
class ConvergenceCriteria:
    """Stopping thresholds on the margin change per category."""

    eta_p_mw: float = 0.001
    eta_q_mvar: float = 0.001
    eta_v: float = 1e-5
    eta_i: float = 1e-3
    max_outer: int = 15


def participation_factors(net: NetworkCase, uspec: UncertaintySpec) -> np.ndarray:
    """Automatic generation participation shares, summing to one.

    "proportional_pmax" splits by capacity; "uniform" splits equally
    among dispatchable generators; an explicit list gives one share per
    composite generator in case order.
    """
    rule = uspec.alpha_rule
    ng = len(net.gens)
    if isinstance(rule, str):
        if rule == "proportional_pmax":
            cap = np.array([max(g.p_max, 0.0) for g in net.gens])
            if cap.sum() <= 0:
                raise ValueError("no generation capacity to distribute")
            return cap / cap.sum()
        if rule == "uniform":
            disp = np.array([g.dispatchable for g in net.gens], dtype=bool)
            if not disp.any():
                raise ValueError("no dispatchable generator")
            alpha = np.zeros(ng)
            alpha[disp] = 1.0 / disp.sum()
            return alpha
        raise ValueError(f"unknown participation rule {rule!r}")
    alpha = np.asarray(rule, dtype=float)
    if alpha.shape != (ng,):
        raise ValueError(
            f"explicit participation list has {alpha.size} entries, "
            f"case has {ng} generators"
        )
    if abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError(f"participation factors sum to {alpha.sum()}, not 1")
    return alpha


def compute_eta(net: NetworkCase, new: UncertaintyMargins,
                old: UncertaintyMargins) -> dict:
    """Largest margin change per category: MW, MVAr and p.u."""
    d = new.max_abs_diff(old)
    return {
        "p": d["p"] * net.base_mva,
        "q": d["q"] * net.base_mva,
        "v": d["v"],
        "i": d["i"],
    }


def _eta_normalized(eta: dict, crit: ConvergenceCriteria) -> float:
    return max(
        eta["p"] / crit.eta_p_mw,
        eta["q"] / crit.eta_q_mvar,
        eta["v"] / crit.eta_v,
        eta["i"] / crit.eta_i,
    )


@dataclass
class IterationRecord:
    """One outer iteration: its cost and how far the margins moved."""

    k: int
    cost: float
    eta: dict
    opf_iterations: int
    opf_status: str

    def to_dict(self) -> dict:
        return {"k": self.k, "cost": self.cost, "eta": dict(self.eta),
                "opf_iterations": self.opf_iterations,
                "opf_status": self.opf_status}


@dataclass
class SolveReport:
    """Outcome of the iterative chance-constrained solve."""

    engine: str
    converged: bool
    solution: OPFSolution
    margins: UncertaintyMargins
    iterations: list = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.solution.cost

    @property
    def dispatch(self) -> Dispatch:
        return self.solution.dispatch()

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "engine": self.engine,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "cost": self.cost,
            "opf_status": self.solution.status,
            "binding": list(self.solution.binding),
            "iterations": [r.to_dict() for r in self.iterations],
        }


def solve_cc_acopf(net: NetworkCase, adm: AdmittanceMatrix,
                   uspec: UncertaintySpec, engine: str = "analytical",
                   n_mc: int = 1000, n_scenarios: int | None = None,
                   criteria: ConvergenceCriteria | None = None,
                   threads: int | None = None,
                   opt_tol: float = 1e-6) -> SolveReport:
    """Iterative margin tightening until the margins stop changing.

    Each pass solves a deterministic OPF under the previous margins and
    recomputes margins at its operating point with the chosen engine.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown margin engine {engine!r}")
    if criteria is None:
        criteria = ConvergenceCriteria()
    alpha = participation_factors(net, uspec)

    margins_prev = UncertaintyMargins.zeros(net)
    warm = None
    records: list[IterationRecord] = []
    best = None  # (normalized eta, solution, margins)
    converged = False
    solution = None
    margins_new = margins_prev

    for k in range(1, criteria.max_outer + 1):
        bounds = tighten_bounds(net, margins_prev)
        solution = solve_acopf(net, adm, bounds, warm=warm, opt_tol=opt_tol)
        if not solution.converged:
            raise RuntimeError(
                f"inner OPF failed at outer iteration {k}: {solution.status}"
            )
        warm = solution
        dispatch = solution.dispatch()

        if engine == "analytical":
            op = solve_power_flow(net, adm, dispatch.schedule(net))
            if not op.converged:
                raise RuntimeError(
                    f"power flow at the OPF point diverged (iteration {k})"
                )
            margins_new = analytical_margins(net, adm, op, uspec, alpha)
        elif engine == "monte_carlo":
            margins_new = monte_carlo_margins(net, adm, dispatch, uspec,
                                              alpha, n=n_mc, threads=threads)
        else:
            margins_new = scenario_margins(net, adm, dispatch, uspec, alpha,
                                           n_scenarios=n_scenarios,
                                           threads=threads)

        eta = compute_eta(net, margins_new, margins_prev)
        records.append(IterationRecord(
            k=k, cost=solution.cost, eta=eta,
            opf_iterations=solution.iterations, opf_status=solution.status,
        ))
        norm = _eta_normalized(eta, criteria)
        if best is None or norm < best[0]:
            best = (norm, solution, margins_new)
        if norm <= 1.0:
            converged = True
            break
        margins_prev = margins_new

    if not converged and best is not None:
        _, solution, margins_new = best

    return SolveReport(
        engine=engine,
        converged=converged,
        solution=solution,
        margins=margins_new,
        iterations=records,
    )
