"""Newton-Raphson power flow in polar coordinates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .network import PQ, SLACK, AdmittanceMatrix, NetworkCase

PF_TOL = 1e-8
PF_MAX_ITER = 30


@dataclass
class PFSchedule:
    """Injection schedule: what the power flow must reproduce.

    p is enforced at every non-slack bus, q at PQ buses, v_set at PV and
    slack buses. All quantities are per-unit net injections (generation
    minus load).
    """

    p: np.ndarray
    q: np.ndarray
    v_set: np.ndarray
    theta_slack: float = 0.0

    def copy(self) -> "PFSchedule":
        return PFSchedule(self.p.copy(), self.q.copy(), self.v_set.copy(), self.theta_slack)


@dataclass
class PFJacobian:
    """Power-flow Jacobian at a state, full and reduced to the unknowns.

    Row order of the full matrix: P equations for all buses, then Q
    equations for all buses. Column order: theta for all buses, then v.
    The reduced matrix keeps P rows at non-slack buses, Q rows at PQ
    buses, theta columns at non-slack buses and v columns at PQ buses.
    """

    full: sp.csr_matrix
    reduced: sp.csr_matrix
    row_keep: np.ndarray
    col_keep: np.ndarray
    p_rows: np.ndarray  # bus index per reduced P row
    q_rows: np.ndarray  # bus index per reduced Q row


@dataclass
class OperatingPoint:
    theta: np.ndarray
    v: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    mismatch_history: list = field(default_factory=list)


def _index_sets(net: NetworkCase):
    types = net.bus_types
    non_slack = np.flatnonzero(types != SLACK)
    pq = np.flatnonzero(types == PQ)
    return non_slack, pq


def mismatch(net: NetworkCase, adm: AdmittanceMatrix, schedule: PFSchedule,
             theta: np.ndarray, v: np.ndarray):
    """Mismatch vector [P - p_sched at non-slack; Q - q_sched at PQ] plus P, Q."""
    p, q = kernels.injections(adm, theta, v)
    non_slack, pq = _index_sets(net)
    f = np.concatenate([p[non_slack] - schedule.p[non_slack], q[pq] - schedule.q[pq]])
    return f, p, q


def power_flow_jacobian(net: NetworkCase, adm: AdmittanceMatrix,
                        theta: np.ndarray, v: np.ndarray,
                        p: np.ndarray | None = None,
                        q: np.ndarray | None = None) -> PFJacobian:
    """Assemble the polar power-flow Jacobian at the given state."""
    n = net.n_bus
    full = kernels.jacobian_full(adm, theta, v, p, q)
    non_slack, pq = _index_sets(net)
    row_keep = np.concatenate([non_slack, n + pq])
    col_keep = np.concatenate([non_slack, n + pq])
    reduced = full[row_keep][:, col_keep].tocsr()
    return PFJacobian(
        full=full,
        reduced=reduced,
        row_keep=row_keep,
        col_keep=col_keep,
        p_rows=non_slack,
        q_rows=pq,
    )


def solve_power_flow(net: NetworkCase, adm: AdmittanceMatrix, schedule: PFSchedule,
                     start: OperatingPoint | tuple | None = None,
                     tol: float = PF_TOL, max_iter: int = PF_MAX_ITER) -> OperatingPoint:
    """Solve the power flow with Newton's method.

    Voltage magnitudes are held at the schedule's set-points on PV and
    slack buses; no PV-to-PQ switching is performed. A half step is taken
    whenever the full Newton step would increase the mismatch norm.
    """
    n = net.n_bus
    types = net.bus_types
    non_slack, pq = _index_sets(net)

    if start is None:
        theta = np.zeros(n)
        v = np.ones(n)
    elif isinstance(start, OperatingPoint):
        theta = start.theta.copy()
        v = start.v.copy()
    else:
        theta = np.asarray(start[0], dtype=float).copy()
        v = np.asarray(start[1], dtype=float).copy()
    theta[net.slack] = schedule.theta_slack
    fixed_v = types != PQ
    v[fixed_v] = schedule.v_set[fixed_v]

    history: list[float] = []
    converged = False
    iterations = 0
    f, p, q = mismatch(net, adm, schedule, theta, v)
    normf = float(np.abs(f).max()) if len(f) else 0.0
    history.append(normf)

    for _ in range(max_iter):
        if normf <= tol:
            converged = True
            break
        jac = power_flow_jacobian(net, adm, theta, v, p, q)
        try:
            lu = splu(jac.reduced.tocsc())
            dx = lu.solve(-f)
        except RuntimeError:
            break  # singular Jacobian
        if not np.all(np.isfinite(dx)):
            break
        iterations += 1

        n_th = len(non_slack)
        step = 1.0
        while True:
            theta_new = theta.copy()
            v_new = v.copy()
            theta_new[non_slack] += step * dx[:n_th]
            v_new[pq] += step * dx[n_th:]
            if np.all(v_new[pq] > 0.0):
                f_new, p_new, q_new = mismatch(net, adm, schedule, theta_new, v_new)
                norm_new = float(np.abs(f_new).max()) if len(f_new) else 0.0
                if norm_new <= normf or step <= 0.5:
                    break
            elif step <= 0.5:
                norm_new = np.inf
                f_new, p_new, q_new = f, p, q
                theta_new, v_new = theta, v
                break
            step *= 0.5

        theta, v, f, p, q, normf = theta_new, v_new, f_new, p_new, q_new, norm_new
        history.append(normf)
        if not np.isfinite(normf):
            break
    else:
        converged = normf <= tol

    return OperatingPoint(
        theta=theta,
        v=v,
        p_inj=p,
        q_inj=q,
        converged=converged,
        iterations=iterations,
        max_mismatch=normf,
        mismatch_history=history,
    )


@dataclass
class Dispatch:
    """A generator dispatch decision: outputs plus voltage targets."""

    p_g: np.ndarray  # active output per composite generator, p.u.
    q_g: np.ndarray  # reactive output per composite generator, p.u.
    v_bus: np.ndarray  # voltage targets per bus (used at PV and slack)

    def schedule(self, net: NetworkCase) -> PFSchedule:
        return make_schedule(net, self.p_g, self.v_bus)


def case_dispatch(net: NetworkCase) -> Dispatch:
    """Dispatch recorded in the case file (outputs and set-points)."""
    v_bus = np.ones(net.n_bus)
    for g in net.gens:
        v_bus[g.bus] = g.vg
    return Dispatch(
        p_g=np.array([g.pg0 for g in net.gens]),
        q_g=np.zeros(len(net.gens)),
        v_bus=v_bus,
    )


def case_dispatch_schedule(net: NetworkCase) -> PFSchedule:
    """Schedule from the case file's generator dispatch and set-points."""
    return case_dispatch(net).schedule(net)


def make_schedule(net: NetworkCase, p_g: np.ndarray, v_bus: np.ndarray) -> PFSchedule:
    """Build the injection schedule for a generator dispatch.

    p_g is the composite generator active output (p.u.), v_bus the voltage
    targets (only PV and slack entries are used).
    """
    p = -net.pd
    for g, pg in zip(net.gens, p_g):
        p[g.bus] += pg
    q = -net.qd
    return PFSchedule(p=p, q=q, v_set=np.asarray(v_bus, dtype=float).copy())


def slack_gen_p(net: NetworkCase, op: OperatingPoint) -> float:
    """Slack generator active output implied by an operating point (p.u.)."""
    return float(op.p_inj[net.slack] + net.pd[net.slack])


def gen_reactive(net: NetworkCase, op: OperatingPoint) -> np.ndarray:
    """Reactive output of every composite generator implied by a state (p.u.)."""
    return np.array([op.q_inj[g.bus] + net.qd[g.bus] for g in net.gens])
