"""Deterministic AC optimal power flow with optional tightened limits.

Minimizes total generation cost over voltage angles, magnitudes and
generator set-points subject to full nonlinear power balance, voltage
and generator boxes, and branch current limits at both ends. Solved with
a primal-dual interior-point method using a Mehrotra predictor-corrector
step (single KKT factorization per iteration, shared by both passes).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .network import AdmittanceMatrix, NetworkCase
from .powerflow import Dispatch
from . import kernels

FIXED_VAR_TOL = 1e-9
BINDING_TOL = 1e-5
FRACTION_TO_BOUNDARY = 0.99995


class InfeasibleBoundsError(ValueError):
    """Raised when tightened limits leave no feasible interval."""


@dataclass
class TightenedBounds:
    """Effective operating limits after margin tightening, p.u."""

    v_min: np.ndarray
    v_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    i_max: np.ndarray  # effective current limit per branch, inf if unrated


def tighten_bounds(net: NetworkCase, margins=None) -> TightenedBounds:
    """Shrink every operating box by its uncertainty margin.

    With margins=None the original limits are returned. Raises
    InfeasibleBoundsError when a box becomes empty or a current limit
    non-positive.
    """
    v_min = np.array([b.v_min for b in net.buses])
    v_max = np.array([b.v_max for b in net.buses])
    p_min = np.array([g.p_min for g in net.gens])
    p_max = np.array([g.p_max for g in net.gens])
    q_min = np.array([g.q_min for g in net.gens])
    q_max = np.array([g.q_max for g in net.gens])
    i_max = np.array([br.i_max for br in net.branches])

    if margins is not None:
        v_min = v_min + margins.lambda_v_l
        v_max = v_max - margins.lambda_v_u
        p_min = p_min + margins.lambda_p_l
        p_max = p_max - margins.lambda_p_u
        q_min = q_min + margins.lambda_q_l
        q_max = q_max - margins.lambda_q_u
        i_max = np.where(np.isfinite(i_max), i_max - margins.lambda_i_u, i_max)

    def check(lo, hi, what, ids):
        bad = lo > hi + 1e-12
        if bad.any():
            k = int(np.argmax(bad))
            raise InfeasibleBoundsError(
                f"{what} box empty at {ids[k]}: [{lo[k]:.6g}, {hi[k]:.6g}]"
            )

    bus_ids = [f"bus{b.id}" for b in net.buses]
    gen_ids = [f"bus{net.buses[g.bus].id}" for g in net.gens]
    check(v_min, v_max, "voltage", bus_ids)
    check(p_min, p_max, "active power", gen_ids)
    check(q_min, q_max, "reactive power", gen_ids)
    rated = np.isfinite(i_max)
    if (i_max[rated] <= 0).any():
        k = int(np.flatnonzero(rated)[np.argmax(i_max[rated] <= 0)])
        br = net.branches[k]
        raise InfeasibleBoundsError(
            f"current limit non-positive on branch {net.buses[br.f].id}-"
            f"{net.buses[br.t].id}: {i_max[k]:.6g}"
        )
    return TightenedBounds(v_min, v_max, p_min, p_max, q_min, q_max, i_max)


@dataclass
class OPFSolution:
    """Result of one deterministic optimal power flow solve."""

    p_g: np.ndarray  # p.u.
    q_g: np.ndarray  # p.u.
    v: np.ndarray  # p.u., all buses
    theta: np.ndarray  # rad
    cost: float  # $/h
    converged: bool
    status: str
    iterations: int
    feascond: float
    gradcond: float
    compcond: float
    costcond: float
    binding: list = field(default_factory=list)
    bus_p_price: np.ndarray | None = None  # $/MWh
    solve_time: float = 0.0

    def dispatch(self) -> Dispatch:
        return Dispatch(p_g=self.p_g.copy(), q_g=self.q_g.copy(),
                        v_bus=self.v.copy())


def evaluate_objective(net: NetworkCase, p_g: np.ndarray) -> float:
    """Total generation cost in $/h for composite outputs in p.u."""
    base = net.base_mva
    return float(sum(g.cost.value(float(p) * base)
                     for g, p in zip(net.gens, p_g)))


@dataclass
class _SegmentVar:
    """Fill variable for one cost segment of a multi-segment generator.

    The composite output is the sum of segment fills; each fill carries
    the smooth quadratic of its own segment, so the objective has no
    slope discontinuities anywhere in the variable space. Convexity makes
    merit-order filling optimal automatically.
    """

    gen: int
    seg: int
    brk_mw: float  # absolute output where this segment starts
    width_mw: float
    a: float  # segment quadratic, $/h over absolute MW
    b: float

    def incremental(self, w_mw: float) -> float:
        p = self.brk_mw + w_mw
        return (self.a * p * p + self.b * p) - (
            self.a * self.brk_mw**2 + self.b * self.brk_mw
        )

    def deriv_mw(self, w_mw: float) -> float:
        return 2.0 * self.a * (self.brk_mw + w_mw) + self.b


def _d2sbus(ybus: sp.spmatrix, vc: np.ndarray, lam: np.ndarray):
    """Hessian blocks of lam . S(theta, v) over angles and magnitudes.

    Returns the four complex blocks (aa, av, va, vv); callers take the
    real part for active-power multipliers and the imaginary part for
    reactive ones.
    """
    ibus = ybus @ vc
    diag_v = sp.diags(vc)
    diag_lam = sp.diags(lam)
    a = sp.diags(lam * vc)
    b = ybus @ diag_v
    c = a @ b.conj()
    d = ybus.conj().T @ diag_v
    e = diag_v.conj() @ (d @ diag_lam - sp.diags(d @ lam))
    f = c - a @ sp.diags(np.conj(ibus))
    g = sp.diags(1.0 / np.abs(vc))
    gaa = e + f
    gva = 1j * (g @ (e - f))
    gav = gva.T
    gvv = g @ (c + c.T) @ g
    return gaa, gav, gva, gvv


class _Problem:
    """Assembled NLP data for one solve: variable maps, bounds, constraint rows."""

    def __init__(self, net: NetworkCase, adm: AdmittanceMatrix,
                 bounds: TightenedBounds):
        self.net = net
        self.adm = adm
        self.bounds = bounds
        m = net.n_bus
        ng = len(net.gens)
        self.m = m
        self.ng = ng

        # multi-segment costs get one fill variable per segment
        self.segvars: list[_SegmentVar] = []
        self.multi_gens: list[int] = []
        for gi, gen in enumerate(net.gens):
            curve = gen.cost
            if curve.n_segments < 2:
                continue
            self.multi_gens.append(gi)
            for k in range(curve.n_segments):
                self.segvars.append(_SegmentVar(
                    gen=gi, seg=k,
                    brk_mw=float(curve.p_brk[k]),
                    width_mw=float(curve.p_brk[k + 1] - curve.p_brk[k]),
                    a=float(curve.a[k]), b=float(curve.b[k]),
                ))
        nw = len(self.segvars)
        self.nx = 2 * m + 2 * ng + nw
        self.i_th = np.arange(m)
        self.i_v = m + np.arange(m)
        self.i_p = 2 * m + np.arange(ng)
        self.i_q = 2 * m + ng + np.arange(ng)
        self.i_w = 2 * m + 2 * ng + np.arange(nw)

        lb = np.full(self.nx, -np.inf)
        ub = np.full(self.nx, np.inf)
        lb[self.i_th[net.slack]] = ub[self.i_th[net.slack]] = 0.0
        lb[self.i_v], ub[self.i_v] = bounds.v_min, bounds.v_max
        lb[self.i_p], ub[self.i_p] = bounds.p_min, bounds.p_max
        lb[self.i_q], ub[self.i_q] = bounds.q_min, bounds.q_max
        base = net.base_mva
        for j, sv in zip(self.i_w, self.segvars):
            lb[j], ub[j] = 0.0, sv.width_mw / base
        self.lb, self.ub = lb, ub

        both = np.isfinite(lb) & np.isfinite(ub)
        self.fixed = both & (ub - lb < FIXED_VAR_TOL)
        self.free = np.flatnonzero(~self.fixed)
        self.x_template = np.zeros(self.nx)
        self.x_template[self.fixed] = 0.5 * (lb[self.fixed] + ub[self.fixed])

        # generator incidence: bus injections from set-points
        cg = sp.csr_matrix(
            (np.ones(ng), ([g.bus for g in net.gens], np.arange(ng))),
            shape=(m, ng),
        )
        zg = sp.csr_matrix((m, ng))
        self.dg_setpoints = sp.bmat([[-cg, zg], [zg, -cg]], format="csr")
        self.cg = cg

        # constant coupling rows: composite output equals its segment fills
        rows, cols, vals = [], [], []
        for r, gi in enumerate(self.multi_gens):
            rows.append(r)
            cols.append(self.i_p[gi])
            vals.append(1.0)
        for j, sv in zip(self.i_w, self.segvars):
            rows.append(self.multi_gens.index(sv.gen))
            cols.append(j)
            vals.append(-1.0)
        self.dg_fill = sp.csr_matrix((vals, (rows, cols)),
                                     shape=(len(self.multi_gens), self.nx))

        # box inequality rows over free variables with finite bounds
        rows, cols, vals, rhs, labels = [], [], [], [], []
        names = self._var_names()
        for j in self.free:
            if np.isfinite(ub[j]):
                rows.append(len(rhs))
                cols.append(j)
                vals.append(1.0)
                rhs.append(ub[j])
                labels.append(f"{names[j]}:max")
            if np.isfinite(lb[j]):
                rows.append(len(rhs))
                cols.append(j)
                vals.append(-1.0)
                rhs.append(-lb[j])
                labels.append(f"{names[j]}:min")
        self.a_box = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), self.nx))
        self.b_box = np.asarray(rhs)
        self.rated = [br for br in net.branches if np.isfinite(bounds.i_max[br.idx])]
        for br in self.rated:
            tag = f"i:branch{br.idx}:{net.buses[br.f].id}-{net.buses[br.t].id}"
            labels.append(f"{tag}:from")
            labels.append(f"{tag}:to")
        self.labels = labels
        self.niq = len(self.b_box) + 2 * len(self.rated)
        self.neq = 2 * m + len(self.multi_gens)

    def _var_names(self) -> list:
        net = self.net
        names = [""] * self.nx
        for b in net.buses:
            names[self.i_th[b.idx]] = f"theta:bus{b.id}"
            names[self.i_v[b.idx]] = f"v:bus{b.id}"
        for gi, g in enumerate(net.gens):
            names[self.i_p[gi]] = f"p:bus{net.buses[g.bus].id}"
            names[self.i_q[gi]] = f"q:bus{net.buses[g.bus].id}"
        for j, sv in zip(self.i_w, self.segvars):
            bus_id = net.buses[net.gens[sv.gen].bus].id
            names[j] = f"cost_seg:bus{bus_id}:{sv.seg}"
        return names

    def objective(self, x: np.ndarray):
        """Cost, gradient and diagonal curvature over the p, q, w blocks.

        Single-segment generators carry their quadratic on the p column;
        multi-segment ones on their fill columns, leaving p linear-free.
        """
        base = self.net.base_mva
        f = 0.0
        df = np.zeros(self.nx)
        d2f_diag = np.zeros(2 * self.ng + len(self.segvars))
        for gi, gen in enumerate(self.net.gens):
            if gen.cost.n_segments >= 2:
                # constant part: cost at the bottom of the curve
                p0 = float(gen.cost.p_brk[0])
                f += float(gen.cost.value(p0))
                continue
            p_mw = float(x[self.i_p[gi]]) * base
            f += float(gen.cost.value(p_mw))
            df[self.i_p[gi]] = float(gen.cost.deriv(p_mw)) * base
            d2f_diag[gi] = float(gen.cost.deriv2(p_mw)) * base**2
        for s, (j, sv) in enumerate(zip(self.i_w, self.segvars)):
            w_mw = float(x[j]) * base
            f += sv.incremental(w_mw)
            df[j] = sv.deriv_mw(w_mw) * base
            d2f_diag[2 * self.ng + s] = 2.0 * sv.a * base**2
        return f, df, d2f_diag

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = self.x_template.copy()
        x[self.free] = x_free
        return x

    def split(self, x: np.ndarray):
        return x[self.i_th], x[self.i_v], x[self.i_p], x[self.i_q]

    def equalities(self, x: np.ndarray):
        """Power balance and fill-coupling residuals with their Jacobian.

        Rows: active balance per bus, reactive balance per bus, then one
        p = sum-of-fills row per multi-segment generator.
        """
        theta, v, p, q = self.split(x)
        p_calc, q_calc = kernels.injections(self.adm, theta, v)
        g = np.concatenate([
            p_calc - self.cg @ p + self.net.pd,
            q_calc - self.cg @ q + self.net.qd,
            self.dg_fill @ x,
        ])
        jac = kernels.jacobian_full(self.adm, theta, v, p_calc, q_calc)
        blocks = [jac, self.dg_setpoints]
        if len(self.segvars):
            blocks.append(sp.csr_matrix((2 * self.m, len(self.segvars))))
        dg = sp.vstack([sp.hstack(blocks), self.dg_fill], format="csr")
        return g, dg

    def _branch_end_currents(self, x: np.ndarray):
        theta, v, _, _ = self.split(x)
        vc = v * np.exp(1j * theta)
        out = []
        adm = self.adm
        for br in self.rated:
            k = br.idx
            fb, tb = br.f, br.t
            for y1, y2, b1, b2 in (
                (adm.yff[k], adm.yft[k], fb, tb),
                (adm.ytt[k], adm.ytf[k], tb, fb),
            ):
                out.append((k, b1, b2, y1, y2, y1 * vc[b1] + y2 * vc[b2]))
        return out, vc

    def inequalities(self, x: np.ndarray):
        """Stacked box and squared-current rows with their Jacobian."""
        h_box = self.a_box @ x - self.b_box
        ends, vc = self._branch_end_currents(x)
        if not ends:
            return h_box, self.a_box.copy()
        m = self.m
        h_cur = np.empty(len(ends))
        rows, cols, vals = [], [], []
        theta = x[self.i_th]
        for r, (k, b1, b2, y1, y2, cur) in enumerate(ends):
            lim = self.bounds.i_max[k]
            h_cur[r] = (cur * np.conj(cur)).real - lim * lim
            d = np.array([
                1j * y1 * vc[b1],
                y1 * np.exp(1j * theta[b1]),
                1j * y2 * vc[b2],
                y2 * np.exp(1j * theta[b2]),
            ])
            grad = 2.0 * (np.conj(cur) * d).real
            for c_idx, g_val in zip((b1, m + b1, b2, m + b2), grad):
                rows.append(r)
                cols.append(c_idx)
                vals.append(g_val)
        a_cur = sp.csr_matrix((vals, (rows, cols)),
                              shape=(len(ends), self.nx))
        return np.concatenate([h_box, h_cur]), sp.vstack([self.a_box, a_cur],
                                                         format="csr")

    def hessian(self, x: np.ndarray, lam: np.ndarray, mu: np.ndarray,
                d2f_diag: np.ndarray) -> sp.spmatrix:
        """Hessian of the Lagrangian over all variables.

        lam holds the equality multipliers (balances first, then linear
        fill rows), mu the inequality multipliers in the row order of
        inequalities(); d2f_diag is the diagonal cost curvature over the
        p, q and fill blocks.
        """
        m = self.m
        theta, v, _, _ = self.split(x)
        vc = v * np.exp(1j * theta)
        lam_p, lam_q = lam[:m], lam[m:2 * m]
        paa, pav, pva, pvv = _d2sbus(self.adm.ybus, vc, lam_p)
        qaa, qav, qva, qvv = _d2sbus(self.adm.ybus, vc, lam_q)
        h_state = sp.bmat([
            [paa.real + qaa.imag, pav.real + qav.imag],
            [pva.real + qva.imag, pvv.real + qvv.imag],
        ], format="lil")

        ends, _ = self._branch_end_currents(x)
        mu_cur = mu[len(self.b_box):]
        for r, (k, b1, b2, y1, y2, cur) in enumerate(ends):
            w = mu_cur[r]
            if w == 0.0:
                continue
            e1 = np.exp(1j * theta[b1])
            e2 = np.exp(1j * theta[b2])
            d = np.array([1j * y1 * vc[b1], y1 * e1, 1j * y2 * vc[b2], y2 * e2])
            d2 = np.zeros((4, 4), dtype=complex)
            d2[0, 0] = -y1 * vc[b1]
            d2[0, 1] = d2[1, 0] = 1j * y1 * e1
            d2[2, 2] = -y2 * vc[b2]
            d2[2, 3] = d2[3, 2] = 1j * y2 * e2
            block = 2.0 * (np.outer(d, np.conj(d)) + np.conj(cur) * d2).real
            idx = (b1, m + b1, b2, m + b2)
            for a_loc, a_glob in enumerate(idx):
                for b_loc, b_glob in enumerate(idx):
                    h_state[a_glob, b_glob] += w * block[a_loc, b_loc]

        return sp.bmat([
            [h_state, None],
            [None, sp.diags(d2f_diag)],
        ], format="csr")


def _start_point(prob: _Problem, warm) -> np.ndarray:
    lb, ub = prob.lb, prob.ub
    base = prob.net.base_mva
    x = prob.x_template.copy()
    if warm is None:
        x[prob.i_th] = 0.0
        for blk in (prob.i_v, prob.i_p, prob.i_q, prob.i_w):
            if len(blk):
                x[blk] = 0.5 * (lb[blk] + ub[blk])
    else:
        x[prob.i_th] = warm.theta
        x[prob.i_v] = warm.v
        x[prob.i_p] = warm.p_g
        x[prob.i_q] = warm.q_g
        for j, sv in zip(prob.i_w, prob.segvars):
            p_mw = float(warm.p_g[sv.gen]) * base
            x[j] = np.clip(p_mw - sv.brk_mw, 0.0, sv.width_mw) / base
        # keep free coordinates strictly interior
        for j in prob.free:
            if np.isfinite(lb[j]) and np.isfinite(ub[j]):
                delta = min(1e-4, 0.05 * (ub[j] - lb[j]))
                x[j] = min(max(x[j], lb[j] + delta), ub[j] - delta)
    x[prob.fixed] = prob.x_template[prob.fixed]
    return x


def _step_length(vec: np.ndarray, dvec: np.ndarray) -> float:
    neg = dvec < 0
    if not neg.any():
        return 1.0
    return min(1.0, FRACTION_TO_BOUNDARY * float(np.min(-vec[neg] / dvec[neg])))


def solve_acopf(net: NetworkCase, adm: AdmittanceMatrix,
                bounds: TightenedBounds | None = None, warm=None,
                opt_tol: float = 1e-6, max_iter: int = 150,
                mehrotra: bool = True, trace: list | None = None) -> OPFSolution:
    """Minimize generation cost subject to AC feasibility and limits.

    bounds defaults to the original case limits; warm takes any object
    with theta, v, p_g and q_g attributes for a primal warm start.
    trace, if a list, receives one diagnostic dict per iteration.
    """
    t0 = time.perf_counter()
    if bounds is None:
        bounds = tighten_bounds(net)
    prob = _Problem(net, adm, bounds)
    free = prob.free
    nf = len(free)
    neq, niq = prob.neq, prob.niq

    x_full = _start_point(prob, warm)
    lam = np.zeros(neq)
    h, dh = prob.inequalities(x_full)
    # a warm point already sits close to its bounds; keeping the true
    # slack there avoids re-travelling the whole barrier path
    z_floor = 1e-2 if warm is not None else 1.0
    z = np.maximum(z_floor, -h)
    mu = np.minimum(1.0 / z, 1e4)

    f_prev = np.inf
    status = "iteration_limit"
    converged = False
    feascond = gradcond = compcond = costcond = np.inf
    tiny_steps = 0
    it = 0

    for it in range(max_iter + 1):
        f, df, d2f_diag = prob.objective(x_full)
        g, dg = prob.equalities(x_full)
        h, dh = prob.inequalities(x_full)

        lx = df + dg.T @ lam + dh.T @ mu
        lx_f = lx[free]

        feascond = max(
            float(np.abs(g).max()), float(h.max(initial=0.0))
        ) / (1.0 + max(float(np.abs(x_full).max()), float(np.abs(z).max())))
        gradcond = float(np.abs(lx_f).max()) / (
            1.0 + max(float(np.abs(lam).max(initial=0.0)),
                      float(np.abs(mu).max(initial=0.0)))
        )
        compcond = float(z @ mu) / (1.0 + float(np.abs(x_full).max()))
        costcond = abs(f - f_prev) / (1.0 + abs(f_prev))
        f_prev = f
        if trace is not None:
            trace.append({"it": it, "f": f, "feascond": feascond,
                          "gradcond": gradcond, "compcond": compcond,
                          "costcond": costcond})
        if (feascond < opt_tol and gradcond < opt_tol and compcond < opt_tol
                and costcond < opt_tol):
            converged = True
            status = "converged"
            break
        if it == max_iter:
            break

        lxx = prob.hessian(x_full, lam, mu, d2f_diag)

        dh_f = dh[:, free]
        dg_f = dg[:, free]
        mu_over_z = mu / z
        m_mat = lxx[free][:, free] + dh_f.T @ sp.diags(mu_over_z) @ dh_f
        kkt = sp.bmat([[m_mat, dg_f.T], [dg_f, None]], format="csc")
        try:
            lu = splu(kkt)
        except RuntimeError:
            kkt = kkt + 1e-10 * sp.eye(kkt.shape[0], format="csc")
            try:
                lu = splu(kkt)
            except RuntimeError:
                status = "singular"
                break

        gap = float(z @ mu) / niq

        def direction(gamma: float, corr: np.ndarray):
            n_vec = lx_f + dh_f.T @ ((gamma - corr + mu * h) / z)
            rhs = np.concatenate([-n_vec, -g])
            sol = lu.solve(rhs)
            dx = sol[:nf]
            dlam = sol[nf:]
            dz = -h - z - dh_f @ dx
            dmu = -mu + (gamma - corr - mu * dz) / z
            return dx, dlam, dz, dmu

        if mehrotra:
            dx_a, dlam_a, dz_a, dmu_a = direction(0.0, np.zeros(niq))
            if np.isnan(dx_a).any():
                status = "singular"
                break
            ap_a = _step_length(z, dz_a)
            ad_a = _step_length(mu, dmu_a)
            gap_aff = float((z + ap_a * dz_a) @ (mu + ad_a * dmu_a)) / niq
            sigma = min(max((gap_aff / gap) ** 3, 1e-4), 0.9) if gap > 0 else 0.1
            corr = dz_a * dmu_a
        else:
            sigma = 0.1
            corr = np.zeros(niq)

        dx, dlam, dz, dmu = direction(sigma * gap, corr)
        if np.isnan(dx).any():
            status = "singular"
            break
        alpha_p = _step_length(z, dz)
        alpha_d = _step_length(mu, dmu)
        if max(alpha_p, alpha_d) < 1e-12:
            tiny_steps += 1
            if tiny_steps >= 3:
                status = "stalled"
                break
        else:
            tiny_steps = 0

        x_full[free] += alpha_p * dx
        z += alpha_p * dz
        lam += alpha_d * dlam
        mu += alpha_d * dmu

    theta, v, p_g, q_g = prob.split(x_full)
    binding = [prob.labels[i] for i in np.flatnonzero(h > -BINDING_TOL)
               if not prob.labels[i].startswith("cost_seg:")]
    return OPFSolution(
        p_g=p_g.copy(), q_g=q_g.copy(), v=v.copy(), theta=theta.copy(),
        cost=evaluate_objective(net, p_g),
        converged=converged, status=status, iterations=it,
        feascond=feascond, gradcond=gradcond, compcond=compcond,
        costcond=costcond, binding=binding,
        bus_p_price=lam[: net.n_bus] / net.base_mva,
        solve_time=time.perf_counter() - t0,
    )
