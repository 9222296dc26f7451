"""Network model: buses, branches, composite generators, admittances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .caseio import CaseFormatError, RawCaseTables, UncertaintySpecFile

PQ, PV, SLACK = 1, 2, 3


@dataclass
class CostCurve:
    """Convex piecewise-quadratic generation cost, $/h as a function of MW.

    Segment k covers [p_brk[k], p_brk[k+1]] with cost a[k] p^2 + b[k] p + c[k].
    The curve is continuous with continuous derivative; segments come either
    from a single quadratic or from least-cost aggregation of several units.
    """

    p_brk: np.ndarray  # MW breakpoints, length n_seg + 1
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @classmethod
    def from_quadratic(cls, c2: float, c1: float, c0: float, lo_mw: float, hi_mw: float):
        return cls(
            p_brk=np.array([lo_mw, hi_mw], dtype=float),
            a=np.array([c2], dtype=float),
            b=np.array([c1], dtype=float),
            c=np.array([c0], dtype=float),
        )

    @property
    def n_segments(self) -> int:
        return len(self.a)

    def _seg(self, p_mw):
        k = np.searchsorted(self.p_brk[1:-1], p_mw, side="right")
        return np.clip(k, 0, self.n_segments - 1)

    def value(self, p_mw):
        k = self._seg(p_mw)
        return self.a[k] * p_mw**2 + self.b[k] * p_mw + self.c[k]

    def deriv(self, p_mw):
        k = self._seg(p_mw)
        return 2.0 * self.a[k] * p_mw + self.b[k]

    def deriv2(self, p_mw):
        k = self._seg(p_mw)
        return 2.0 * self.a[k]


def merit_order_aggregate(units: list[tuple[float, float, float, float, float]]) -> CostCurve:
    """Exact least-cost aggregation of quadratic units into one cost curve.

    Each unit is (c2, c1, c0, lo_mw, hi_mw) with c2 >= 0. The result is the
    value function of dispatching the units at minimum total cost for each
    total output, which is convex piecewise-quadratic with continuous slope.
    """
    for c2, c1, _, lo, hi in units:
        if c2 < 0:
            raise ValueError("cannot aggregate units with concave cost")
        if hi < lo:
            raise ValueError("unit with hi < lo")

    p0 = sum(lo for _, _, _, lo, hi in units)
    c_acc = sum(c2 * lo * lo + c1 * lo + c0 for c2, c1, c0, lo, hi in units)
    free = [(c2, c1, lo, hi) for c2, c1, _, lo, hi in units if hi > lo]
    if not free:
        return CostCurve(
            p_brk=np.array([p0, p0]),
            a=np.array([0.0]),
            b=np.array([0.0]),
            c=np.array([c_acc]),
        )

    events: list[float] = []
    for c2, c1, lo, hi in free:
        if c2 > 0:
            events.append(c1 + 2.0 * c2 * lo)
            events.append(c1 + 2.0 * c2 * hi)
        else:
            events.append(c1)
    events.sort()
    merged: list[float] = []
    for mu in events:
        if not merged or mu - merged[-1] > 1e-9 * max(1.0, abs(mu)):
            merged.append(mu)

    brk = [p0]
    seg_a: list[float] = []
    seg_b: list[float] = []
    seg_c: list[float] = []
    p_acc = p0

    def add_segment(a: float, b: float, p_new: float, c_new: float) -> None:
        nonlocal p_acc, c_acc
        if p_new - p_acc <= 1e-12:
            return
        # intercept chosen so the absolute quadratic passes through (p_acc, c_acc)
        c = c_acc - a * p_acc**2 - b * p_acc
        if seg_a and abs(seg_a[-1] - a) < 1e-12 and abs(seg_b[-1] - b) < 1e-9:
            brk[-1] = p_new
        else:
            seg_a.append(a)
            seg_b.append(b)
            seg_c.append(c)
            brk.append(p_new)
        p_acc = p_new
        c_acc = c_new

    for i, mu in enumerate(merged):
        # constant-price jump from zero-curvature units priced exactly at mu
        width = sum(hi - lo for c2, c1, lo, hi in free if c2 == 0 and abs(c1 - mu) <= 1e-9)
        if width > 0:
            add_segment(0.0, mu, p_acc + width, c_acc + mu * width)
        if i + 1 == len(merged):
            break
        mu2 = merged[i + 1]
        slope = sum(
            1.0 / (2.0 * c2)
            for c2, c1, lo, hi in free
            if c2 > 0 and c1 + 2 * c2 * lo <= mu + 1e-9 and c1 + 2 * c2 * hi >= mu2 - 1e-9
        )
        if slope > 0:
            dp = slope * (mu2 - mu)
            a = 1.0 / (2.0 * slope)
            b = mu - p_acc / slope
            add_segment(a, b, p_acc + dp, c_acc + mu * dp + dp * dp / (2.0 * slope))

    p_hi = sum(hi for _, _, _, lo, hi in units)
    if abs(p_acc - p_hi) > 1e-6 * max(1.0, abs(p_hi)):
        raise AssertionError(f"aggregation did not reach total capacity: {p_acc} vs {p_hi}")
    return CostCurve(
        p_brk=np.asarray(brk, dtype=float),
        a=np.asarray(seg_a, dtype=float),
        b=np.asarray(seg_b, dtype=float),
        c=np.asarray(seg_c, dtype=float),
    )


@dataclass
class Bus:
    id: int
    idx: int
    btype: int  # PQ, PV or SLACK
    pd: float  # p.u.
    qd: float
    gs: float
    bs: float
    v_max: float
    v_min: float
    base_kv: float


@dataclass
class Branch:
    idx: int
    f: int  # from-bus index
    t: int
    r: float
    x: float
    bc: float
    tap: float
    shift: float  # radians
    i_max: float  # p.u. current limit, inf when unrated


@dataclass
class Generator:
    """Composite generator: all in-service units at one bus."""

    idx: int
    bus: int  # bus index
    p_min: float  # p.u.
    p_max: float
    q_min: float
    q_max: float
    vg: float
    cost: CostCurve  # $/h versus MW
    n_units: int
    pg0: float  # p.u., dispatch hint from the case file

    @property
    def dispatchable(self) -> bool:
        return self.p_max > self.p_min


@dataclass
class NetworkCase:
    name: str
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    gens: list[Generator]
    slack: int  # bus index
    n_units_in_service: int

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_types(self) -> np.ndarray:
        return np.array([b.btype for b in self.buses], dtype=int)

    def pq_buses(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == PQ)

    def pv_buses(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == PV)

    def gen_at_bus(self, bus_idx: int) -> Generator | None:
        for g in self.gens:
            if g.bus == bus_idx:
                return g
        return None

    @property
    def pd(self) -> np.ndarray:
        return np.array([b.pd for b in self.buses])

    @property
    def qd(self) -> np.ndarray:
        return np.array([b.qd for b in self.buses])


def build_network(raw: RawCaseTables) -> NetworkCase:
    """Construct the network model from raw tables: per-unit conversion,
    in-service filtering and per-bus generator aggregation."""
    base = raw.base_mva
    id2idx = {int(b): i for i, b in enumerate(raw.bus[:, 0])}

    buses = [
        Bus(
            id=int(row[0]),
            idx=i,
            btype=int(row[1]),
            pd=row[2] / base,
            qd=row[3] / base,
            gs=row[4] / base,
            bs=row[5] / base,
            v_max=row[11],
            v_min=row[12],
            base_kv=row[9],
        )
        for i, row in enumerate(raw.bus)
    ]
    slack = next(b.idx for b in buses if b.btype == SLACK)

    branches = []
    for i, row in enumerate(raw.branch):
        if int(row[10]) != 1:
            continue
        rate = row[5]
        branches.append(
            Branch(
                idx=len(branches),
                f=id2idx[int(row[0])],
                t=id2idx[int(row[1])],
                r=row[2],
                x=row[3],
                bc=row[4],
                tap=row[8] if row[8] != 0 else 1.0,
                shift=np.deg2rad(row[9]),
                i_max=rate / base if rate > 0 else np.inf,
            )
        )

    by_bus: dict[int, list[int]] = {}
    n_units = 0
    for gi, row in enumerate(raw.gen):
        if int(row[7]) != 1:
            continue
        n_units += 1
        by_bus.setdefault(id2idx[int(row[0])], []).append(gi)

    gens = []
    for bus_idx in sorted(by_bus):
        rows = by_bus[bus_idx]
        if buses[bus_idx].btype == PQ:
            raise CaseFormatError(
                f"{raw.name}: in-service generator at PQ bus {buses[bus_idx].id}"
            )
        vg = raw.gen[rows[0], 5]
        if any(abs(raw.gen[r, 5] - vg) > 1e-9 for r in rows):
            raise CaseFormatError(
                f"{raw.name}: units at bus {buses[bus_idx].id} disagree on voltage set-point"
            )
        units = []
        for r in rows:
            coeffs = raw.gencost[r][4:]
            c2, c1, c0 = ([0.0] * (3 - len(coeffs)) + list(coeffs))[:3]
            units.append((c2, c1, c0, raw.gen[r, 9], raw.gen[r, 8]))
        gens.append(
            Generator(
                idx=len(gens),
                bus=bus_idx,
                p_min=sum(raw.gen[r, 9] for r in rows) / base,
                p_max=sum(raw.gen[r, 8] for r in rows) / base,
                q_min=sum(raw.gen[r, 4] for r in rows) / base,
                q_max=sum(raw.gen[r, 3] for r in rows) / base,
                vg=vg,
                cost=merit_order_aggregate(units),
                n_units=len(rows),
                pg0=sum(raw.gen[r, 1] for r in rows) / base,
            )
        )

    for b in buses:
        if b.btype in (PV, SLACK) and b.idx not in by_bus:
            raise CaseFormatError(f"{raw.name}: bus {b.id} is type {b.btype} but has no generator")

    net = NetworkCase(
        name=raw.name,
        base_mva=base,
        buses=buses,
        branches=branches,
        gens=gens,
        slack=slack,
        n_units_in_service=n_units,
    )
    _check_connected(net)
    return net


def _check_connected(net: NetworkCase) -> None:
    n = net.n_bus
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in net.branches:
        adj[br.f].append(br.t)
        adj[br.t].append(br.f)
    seen = np.zeros(n, dtype=bool)
    stack = [net.slack]
    seen[net.slack] = True
    while stack:
        j = stack.pop()
        for k in adj[j]:
            if not seen[k]:
                seen[k] = True
                stack.append(k)
    if not seen.all():
        missing = [net.buses[i].id for i in np.flatnonzero(~seen)[:5]]
        raise CaseFormatError(f"{net.name}: buses {missing} not connected to the slack bus")


@dataclass
class AdmittanceMatrix:
    """Bus admittance matrix plus per-branch admittance quadruples.

    The CSR component arrays (indptr, indices, g_data, b_data) are kept
    separately so numerical kernels can consume them directly.
    """

    ybus: sp.csr_matrix  # complex
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f: np.ndarray  # from-bus index per branch
    t: np.ndarray
    indptr: np.ndarray = field(default=None, repr=False)
    indices: np.ndarray = field(default=None, repr=False)
    g_data: np.ndarray = field(default=None, repr=False)
    b_data: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.indptr is None:
            self.indptr = self.ybus.indptr.astype(np.int64)
            self.indices = self.ybus.indices.astype(np.int64)
            self.g_data = np.ascontiguousarray(self.ybus.data.real)
            self.b_data = np.ascontiguousarray(self.ybus.data.imag)


def build_admittance(net: NetworkCase) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix and branch admittance quadruples."""
    n = net.n_bus
    nb = len(net.branches)
    yff = np.zeros(nb, dtype=complex)
    yft = np.zeros(nb, dtype=complex)
    ytf = np.zeros(nb, dtype=complex)
    ytt = np.zeros(nb, dtype=complex)
    f = np.array([br.f for br in net.branches], dtype=np.int64)
    t = np.array([br.t for br in net.branches], dtype=np.int64)

    for i, br in enumerate(net.branches):
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.bc
        tap = br.tap * np.exp(1j * br.shift)
        yff[i] = (ys + ysh) / (br.tap**2)
        yft[i] = -ys / np.conj(tap)
        ytf[i] = -ys / tap
        ytt[i] = ys + ysh

    ysh_bus = np.array([complex(b.gs, b.bs) for b in net.buses])
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh_bus])
    ybus = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    ybus.sum_duplicates()
    return AdmittanceMatrix(ybus=ybus, yff=yff, yft=yft, ytf=ytf, ytt=ytt, f=f, t=t)


def branch_current_magnitudes(adm: AdmittanceMatrix, theta: np.ndarray, v: np.ndarray):
    """Current magnitudes (p.u.) at the from and to ends of every branch."""
    V = v * np.exp(1j * theta)
    i_f = np.abs(adm.yff * V[adm.f] + adm.yft * V[adm.t])
    i_t = np.abs(adm.ytf * V[adm.f] + adm.ytt * V[adm.t])
    return i_f, i_t


def gamma_from_power_factor(cos_phi) -> np.ndarray:
    """Reactive/active coupling factor for a constant-power-factor deviation."""
    cos_phi = np.asarray(cos_phi, dtype=float)
    out = np.sqrt(1.0 - cos_phi**2) / cos_phi
    return out if out.ndim else float(out)


def sqrt_psd(sigma: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix.

    Eigenvalues below -1e-10 are rejected; small negative round-off is
    clamped to zero.
    """
    sym = (sigma + sigma.T) / 2
    w, u = np.linalg.eigh(sym)
    if w.min() < -1e-10:
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


@dataclass
class UncertaintySpec:
    """Uncertainty description bound to a network: indices, covariance, gammas."""

    src_bus: np.ndarray  # bus index per source
    sigma: np.ndarray  # covariance of active-power deviations, p.u.
    gamma: np.ndarray  # reactive/active coupling per source
    epsilons: "object"
    alpha_rule: str | dict[int, float]
    quantile_model: str
    seed: int

    @property
    def n_src(self) -> int:
        return len(self.src_bus)


def bind_uncertainty(net: NetworkCase, usf: UncertaintySpecFile) -> UncertaintySpec:
    """Resolve bus ids, build the covariance matrix and reactive couplings."""
    id2idx = {b.id: b.idx for b in net.buses}
    try:
        src = np.array([id2idx[b] for b in usf.uncertain_buses], dtype=np.int64)
    except KeyError as exc:
        raise CaseFormatError(f"uncertain bus {exc.args[0]} not present in case") from None

    n = len(src)
    if usf.std_dev_kind == "relative":
        rel = (
            np.full(n, usf.std_dev_value)
            if np.isscalar(usf.std_dev_value)
            else np.asarray(usf.std_dev_value)
        )
        std = rel * np.array([net.buses[j].pd for j in src])
    else:
        std = (
            np.full(n, usf.std_dev_value)
            if np.isscalar(usf.std_dev_value)
            else np.asarray(usf.std_dev_value)
        )

    corr = usf.correlation
    if isinstance(corr, (int, float)):
        cmat = np.full((n, n), float(corr))
        np.fill_diagonal(cmat, 1.0)
    elif isinstance(corr, dict):
        zones = np.array([usf.zones[b] for b in usf.uncertain_buses])
        same = zones[:, None] == zones[None, :]
        cmat = np.where(same, corr["within_zone"], corr["between_zone"])
        np.fill_diagonal(cmat, 1.0)
    else:
        cmat = np.asarray(corr, dtype=float)

    sigma = cmat * np.outer(std, std)
    eig = np.linalg.eigvalsh((sigma + sigma.T) / 2)
    if eig.min() < -1e-10:
        raise CaseFormatError(
            f"covariance is not positive semidefinite (eigenvalue {eig.min():.3e})"
        )

    gamma = np.asarray(gamma_from_power_factor(usf.power_factor), dtype=float)

    return UncertaintySpec(
        src_bus=src,
        sigma=sigma,
        gamma=gamma,
        epsilons=usf.epsilons,
        alpha_rule=usf.alpha_rule,
        quantile_model=usf.quantile_model,
        seed=usf.seed,
    )
