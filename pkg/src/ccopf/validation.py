"""Monte-Carlo validation of a dispatch under injection uncertainty.

Draws correlated deviation samples, applies the automatic generation and
voltage response, re-solves the power flow per sample, and reports
empirical violation probabilities and expected violation sizes against
the original (untightened) operating limits.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .network import AdmittanceMatrix, NetworkCase, UncertaintySpec, sqrt_psd
from .powerflow import (
    Dispatch,
    OperatingPoint,
    PFSchedule,
    gen_reactive,
    slack_gen_p,
    solve_power_flow,
)
from . import kernels

# Overshoot below this (p.u.) is treated as boundary round-off, not a violation.
VIOLATION_TOL = 1e-9


class DivergedSamplesError(RuntimeError):
    """Raised when too many validation power flows fail to converge."""


@dataclass
class SampleSet:
    """A batch of deviation samples, one row per sample."""

    omega: np.ndarray  # (n_samples, n_src), p.u.
    kind: str  # "gaussian" or "laplace"
    seed: int

    @property
    def n(self) -> int:
        return self.omega.shape[0]


def sample_omega(uspec: UncertaintySpec, n: int, kind: str = "gaussian",
                 seed: int | None = None) -> SampleSet:
    """Draw n correlated deviation vectors.

    "gaussian" draws from N(0, Sigma). "laplace" is a heavier-tailed
    surrogate with the same covariance: iid unit-variance Laplace noise
    colored by the symmetric square root of Sigma.
    """
    if seed is None:
        seed = uspec.seed
    rng = np.random.default_rng(seed)
    n_src = uspec.n_src
    if kind == "gaussian":
        z = rng.standard_normal((n, n_src))
    elif kind == "laplace":
        # scale 1/sqrt(2) gives unit variance per coordinate
        z = rng.laplace(0.0, 1.0 / np.sqrt(2.0), size=(n, n_src))
    else:
        raise ValueError(f"unknown sample kind {kind!r}")
    omega = z @ sqrt_psd(uspec.sigma)
    return SampleSet(omega=omega, kind=kind, seed=seed)


def apply_response(net: NetworkCase, dispatch: Dispatch, uspec: UncertaintySpec,
                   alpha: np.ndarray, omega: np.ndarray) -> PFSchedule:
    """Injection schedule after a deviation omega and the automatic response.

    Uncertain injections move by omega (active) and gamma * omega
    (reactive); every non-slack generator backs off by its participation
    share of the total deviation. Voltage set-points are unchanged; the
    slack bus and PV-bus reactive outputs are left to the power flow.
    """
    sched = dispatch.schedule(net)
    total = float(omega.sum())
    for k, b in enumerate(uspec.src_bus):
        sched.p[b] += omega[k]
        sched.q[b] += uspec.gamma[k] * omega[k]
    for g, a in zip(net.gens, alpha):
        if g.bus != net.slack:
            sched.p[g.bus] -= a * total
    return sched


def monitored_quantities(net: NetworkCase, adm: AdmittanceMatrix,
                         uspec: UncertaintySpec, op: OperatingPoint,
                         omega: np.ndarray) -> dict:
    """Constraint-side quantities implied by a solved deviated state.

    Generator outputs are recovered from bus injections by removing the
    deviated load at the generator's bus, so the returned values are the
    machine quantities the limits apply to.
    """
    v_pq = op.v[net.pq_buses()]
    q_gen = gen_reactive(net, op)
    p_slack = slack_gen_p(net, op)
    for k, b in enumerate(uspec.src_bus):
        if b == net.slack:
            p_slack -= omega[k]
        bt = net.buses[b].btype
        if bt != 1:  # PV or slack: local generator absorbs the reactive deviation
            for gi, g in enumerate(net.gens):
                if g.bus == b:
                    q_gen[gi] -= uspec.gamma[k] * omega[k]
    i_f, i_t = kernels.currents(adm, op.theta, op.v)
    return {"v_pq": v_pq, "q_gen": q_gen, "p_slack": p_slack,
            "i_f": i_f, "i_t": i_t}


@dataclass
class ResponseSamples:
    """Per-sample constraint quantities for a batch of deviations."""

    p_gen: np.ndarray  # (n, n_gen) machine active output, p.u.
    q_gen: np.ndarray  # (n, n_gen)
    v_pq: np.ndarray  # (n, n_pq)
    i_f: np.ndarray  # (n, n_branch)
    i_t: np.ndarray  # (n, n_branch)
    diverged: np.ndarray  # (n,) bool

    @property
    def n_ok(self) -> int:
        return int((~self.diverged).sum())


def _default_threads() -> int:
    return min(8, os.cpu_count() or 1)


def response_samples(net: NetworkCase, adm: AdmittanceMatrix, dispatch: Dispatch,
                     uspec: UncertaintySpec, alpha: np.ndarray,
                     samples: SampleSet, threads: int | None = None) -> ResponseSamples:
    """Re-solve the power flow for every sample and collect machine quantities.

    Results are written into preallocated arrays by sample index, so the
    output is identical for any thread count.
    """
    n = samples.n
    n_gen = len(net.gens)
    slack_gen = next(i for i, g in enumerate(net.gens) if g.bus == net.slack)
    base = solve_power_flow(net, adm, dispatch.schedule(net))
    if not base.converged:
        raise DivergedSamplesError("base-point power flow did not converge")

    out = ResponseSamples(
        p_gen=np.empty((n, n_gen)),
        q_gen=np.empty((n, n_gen)),
        v_pq=np.empty((n, len(net.pq_buses()))),
        i_f=np.empty((n, len(net.branches))),
        i_t=np.empty((n, len(net.branches))),
        diverged=np.zeros(n, dtype=bool),
    )
    alpha = np.asarray(alpha, dtype=float)
    p_sched = np.asarray(dispatch.p_g, dtype=float)

    def run(i: int) -> None:
        omega = samples.omega[i]
        sched = apply_response(net, dispatch, uspec, alpha, omega)
        op = solve_power_flow(net, adm, sched, start=base)
        if not op.converged:
            out.diverged[i] = True
            return
        mq = monitored_quantities(net, adm, uspec, op, omega)
        p_row = p_sched - alpha * omega.sum()
        p_row[slack_gen] = mq["p_slack"]
        out.p_gen[i] = p_row
        out.q_gen[i] = mq["q_gen"]
        out.v_pq[i] = mq["v_pq"]
        out.i_f[i] = mq["i_f"]
        out.i_t[i] = mq["i_t"]

    workers = threads if threads is not None else _default_threads()
    if workers <= 1:
        for i in range(n):
            run(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n)))
    return out


@dataclass
class ConstraintViolation:
    """Empirical violation record for one monitored constraint."""

    cid: str
    category: str  # "p", "q", "v" or "i"
    eps_emp: float
    expected_size: float  # mean overshoot incl. zero samples (MW, MVAr or p.u.)
    max_size: float

    def to_dict(self) -> dict:
        return {"id": self.cid, "category": self.category,
                "eps_emp": self.eps_emp, "expected_size": self.expected_size,
                "max_size": self.max_size}


_CATEGORY_UNITS = {"p": "MW", "q": "MVAr", "v": "p.u.", "i": "p.u."}


@dataclass
class ViolationStats:
    """Violation probabilities and sizes over a validation batch."""

    n_samples: int
    n_diverged: int
    eps_joint: float
    constraints: list[ConstraintViolation] = field(default_factory=list)

    def max_eps(self, category: str | None = None) -> float:
        vals = [c.eps_emp for c in self.constraints
                if category is None or c.category == category]
        return max(vals, default=0.0)

    def max_expected_size(self, category: str) -> float:
        vals = [c.expected_size for c in self.constraints if c.category == category]
        return max(vals, default=0.0)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_diverged": self.n_diverged,
            "eps_joint": self.eps_joint,
            "max_eps_emp": {cat: self.max_eps(cat) for cat in ("p", "q", "v", "i")},
            "max_eps_emp_overall": self.max_eps(),
            "max_expected_size": {
                cat: self.max_expected_size(cat) for cat in ("p", "q", "v", "i")
            },
            "units": dict(_CATEGORY_UNITS),
            "constraints": [c.to_dict() for c in self.constraints],
        }


def _overshoot(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    over = np.maximum(values - hi, lo - values)
    return np.maximum(over, 0.0)


def evaluate_violations(net: NetworkCase, adm: AdmittanceMatrix, dispatch: Dispatch,
                        uspec: UncertaintySpec, alpha: np.ndarray,
                        samples: SampleSet, threads: int | None = None,
                        max_diverged_frac: float = 0.01) -> ViolationStats:
    """Empirical constraint violations of a dispatch against original limits.

    A sample violates a constraint when the machine quantity overshoots
    its limit by more than round-off. Expected sizes average the overshoot
    over all converged samples, zeros included. Raises DivergedSamplesError
    when more than max_diverged_frac of the power flows fail.
    """
    rs = response_samples(net, adm, dispatch, uspec, alpha, samples, threads)
    n = samples.n
    n_div = int(rs.diverged.sum())
    if n_div > max_diverged_frac * n:
        raise DivergedSamplesError(
            f"{n_div} of {n} validation power flows diverged "
            f"(limit {max_diverged_frac:.1%})"
        )
    ok = ~rs.diverged
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise DivergedSamplesError("no validation sample converged")

    base = net.base_mva
    records: list[ConstraintViolation] = []
    any_viol = np.zeros(n_ok, dtype=bool)

    def add(cid: str, cat: str, over_pu: np.ndarray, scale: float) -> None:
        viol = over_pu > VIOLATION_TOL
        nonlocal any_viol
        any_viol |= viol
        records.append(ConstraintViolation(
            cid=cid, category=cat,
            eps_emp=float(viol.mean()),
            expected_size=float(over_pu.mean() * scale),
            max_size=float(over_pu.max() * scale),
        ))

    for gi, g in enumerate(net.gens):
        add(f"p:bus{net.buses[g.bus].id}", "p",
            _overshoot(rs.p_gen[ok, gi], g.p_min, g.p_max), base)
    for gi, g in enumerate(net.gens):
        add(f"q:bus{net.buses[g.bus].id}", "q",
            _overshoot(rs.q_gen[ok, gi], g.q_min, g.q_max), base)
    for j, b in enumerate(net.pq_buses()):
        bus = net.buses[b]
        add(f"v:bus{bus.id}", "v",
            _overshoot(rs.v_pq[ok, j], bus.v_min, bus.v_max), 1.0)
    for br in net.branches:
        if not np.isfinite(br.i_max):
            continue
        flow = np.maximum(rs.i_f[ok, br.idx], rs.i_t[ok, br.idx])
        add(f"i:branch{br.idx}:{net.buses[br.f].id}-{net.buses[br.t].id}", "i",
            _overshoot(flow, -np.inf, br.i_max), 1.0)

    return ViolationStats(
        n_samples=n,
        n_diverged=n_div,
        eps_joint=float(any_viol.mean()),
        constraints=records,
    )


def violation_size_sweep(net: NetworkCase, adm: AdmittanceMatrix,
                         uspec: UncertaintySpec, engine: str = "analytical",
                         eps_values: np.ndarray | None = None,
                         n_samples: int = 2000, n_mc: int = 1000,
                         threads: int | None = None,
                         seed: int | None = None) -> list[dict]:
    """Sweep the violation tolerance and validate each resulting dispatch.

    For every epsilon on the grid, all marginal tolerances are set to that
    value, the chance-constrained dispatch is re-solved with the chosen
    margin engine, and the dispatch is validated. Returns one row per
    (epsilon, category) with the largest empirical violation probability
    and expected violation size.
    """
    from dataclasses import replace

    from .caseio import Epsilons
    from .driver import participation_factors, solve_cc_acopf

    if eps_values is None:
        eps_values = np.arange(0.01, 0.1501, 0.01)
    rows: list[dict] = []
    for e in np.asarray(eps_values, dtype=float):
        eps = Epsilons(eps_p=e, eps_q=e, eps_v=e, eps_i=e, eps_joint=e)
        spec_e = replace(uspec, epsilons=eps)
        report = solve_cc_acopf(net, adm, spec_e, engine=engine, n_mc=n_mc,
                                threads=threads)
        alpha = participation_factors(net, spec_e)
        batch = sample_omega(spec_e, n_samples,
                             seed=spec_e.seed if seed is None else seed)
        stats = evaluate_violations(net, adm, report.dispatch, spec_e, alpha,
                                    batch, threads)
        for cat in ("p", "q", "v", "i"):
            rows.append({
                "epsilon": float(e),
                "category": cat,
                "unit": _CATEGORY_UNITS[cat],
                "max_eps_emp": stats.max_eps(cat),
                "max_expected_size": stats.max_expected_size(cat),
                "eps_joint": stats.eps_joint,
                "cost": report.cost,
                "converged": report.converged,
            })
    return rows
