"""Command-line entry points.

Subcommands: pf (power flow), opf (deterministic optimum), solve
(chance-constrained optimum), validate (Monte-Carlo check of a dispatch),
compare (all margin engines side by side), sweep (violation size versus
tolerance), sensitivities (factor computation and finite-difference check).

Exit codes: 0 success, 1 non-convergence or numerical failure, 2 bad
input, 3 infeasible tightened limits.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .acopf import InfeasibleBoundsError, solve_acopf, tighten_bounds
from .caseio import (
    CaseFormatError,
    derive_stochastic_case,
    load_recipe,
    parse_case,
    parse_uncertainty,
    write_report,
)
from .driver import ConvergenceCriteria, participation_factors, solve_cc_acopf
from .margins import write_margins_csv
from .network import build_admittance, build_network, bind_uncertainty
from .powerflow import Dispatch, case_dispatch, solve_power_flow
from .sensitivity import check_sensitivities_fd, compute_sensitivities
from .validation import (
    DivergedSamplesError,
    evaluate_violations,
    sample_omega,
    violation_size_sweep,
)

EXIT_OK = 0
EXIT_NOCONV = 1
EXIT_BADINPUT = 2
EXIT_INFEASIBLE = 3


@dataclass
class RunConfig:
    """Loaded inputs shared by every subcommand."""

    net: object
    adm: object
    uspec: object = None


def _load(args, need_uncertainty: bool = False) -> RunConfig:
    raw = parse_case(args.case)
    if getattr(args, "recipe", None):
        raw = derive_stochastic_case(raw, load_recipe(args.recipe))
    net = build_network(raw)
    adm = build_admittance(net)
    uspec = None
    if getattr(args, "uncertainty", None):
        uspec = bind_uncertainty(net, parse_uncertainty(args.uncertainty))
    elif need_uncertainty:
        raise CaseFormatError("this command requires --uncertainty")
    return RunConfig(net=net, adm=adm, uspec=uspec)


def _dispatch_dict(net, dispatch: Dispatch) -> dict:
    base = net.base_mva
    return {
        "gen_bus": [net.buses[g.bus].id for g in net.gens],
        "p_g_mw": list(np.asarray(dispatch.p_g) * base),
        "q_g_mvar": list(np.asarray(dispatch.q_g) * base),
        "v_bus": list(np.asarray(dispatch.v_bus)),
    }


def _dispatch_from_file(net, path) -> Dispatch:
    import json

    with open(path) as fh:
        data = json.load(fh)
    if "dispatch" in data:
        data = data["dispatch"]
    for key in ("gen_bus", "p_g_mw", "q_g_mvar", "v_bus"):
        if key not in data:
            raise CaseFormatError(f"dispatch file misses key {key!r}")
    want = [net.buses[g.bus].id for g in net.gens]
    got = [int(b) for b in data["gen_bus"]]
    if got != want:
        raise CaseFormatError("dispatch file generator buses do not match the case")
    if len(data["v_bus"]) != net.n_bus:
        raise CaseFormatError("dispatch file voltage vector length mismatch")
    base = net.base_mva
    return Dispatch(
        p_g=np.asarray(data["p_g_mw"], dtype=float) / base,
        q_g=np.asarray(data["q_g_mvar"], dtype=float) / base,
        v_bus=np.asarray(data["v_bus"], dtype=float),
    )


def cmd_pf(args) -> int:
    cfg = _load(args)
    op = solve_power_flow(cfg.net, cfg.adm, case_dispatch(cfg.net).schedule(cfg.net))
    print(f"power flow: converged={op.converged} iterations={op.iterations} "
          f"max_mismatch={op.max_mismatch:.3e}")
    if args.out:
        write_report(args.out, {
            "case": cfg.net.name,
            "converged": op.converged,
            "iterations": op.iterations,
            "max_mismatch": op.max_mismatch,
            "bus": [b.id for b in cfg.net.buses],
            "v": list(op.v),
            "theta_deg": list(np.degrees(op.theta)),
        })
    return EXIT_OK if op.converged else EXIT_NOCONV


def cmd_opf(args) -> int:
    cfg = _load(args)
    sol = solve_acopf(cfg.net, cfg.adm, tighten_bounds(cfg.net))
    print(f"opf: status={sol.status} iterations={sol.iterations} "
          f"cost={sol.cost:.2f} $/h")
    if args.out:
        report = {
            "case": cfg.net.name,
            "status": sol.status,
            "converged": sol.converged,
            "iterations": sol.iterations,
            "cost": sol.cost,
            "binding": sol.binding,
            "dispatch": _dispatch_dict(cfg.net, sol.dispatch()),
        }
        write_report(args.out, report)
    return EXIT_OK if sol.converged else EXIT_NOCONV


def _criteria_from_args(args) -> ConvergenceCriteria:
    crit = ConvergenceCriteria()
    if getattr(args, "max_outer", None):
        crit.max_outer = args.max_outer
    return crit


def cmd_solve(args) -> int:
    cfg = _load(args, need_uncertainty=True)
    report = solve_cc_acopf(cfg.net, cfg.adm, cfg.uspec, engine=args.engine,
                            n_mc=args.n_mc, n_scenarios=args.n_scenarios,
                            criteria=_criteria_from_args(args),
                            threads=args.threads)
    print(f"solve[{args.engine}]: converged={report.converged} "
          f"outer_iterations={report.n_iterations} cost={report.cost:.2f} $/h")
    for rec in report.iterations:
        eta = rec.eta
        print(f"  k={rec.k} cost={rec.cost:.2f} eta_p={eta['p']:.3e} MW "
              f"eta_q={eta['q']:.3e} MVAr eta_v={eta['v']:.3e} eta_i={eta['i']:.3e}")
    if args.out:
        data = report.to_dict()
        data["case"] = cfg.net.name
        data["dispatch"] = _dispatch_dict(cfg.net, report.dispatch)
        write_report(args.out, data)
    if args.margins_csv:
        write_margins_csv(args.margins_csv, cfg.net, report.margins)
    return EXIT_OK if report.converged else EXIT_NOCONV


def cmd_validate(args) -> int:
    cfg = _load(args, need_uncertainty=True)
    alpha = participation_factors(cfg.net, cfg.uspec)
    if args.dispatch:
        dispatch = _dispatch_from_file(cfg.net, args.dispatch)
        label = "file"
    elif args.engine == "deterministic":
        sol = solve_acopf(cfg.net, cfg.adm, tighten_bounds(cfg.net))
        if not sol.converged:
            print(f"deterministic opf failed: {sol.status}", file=sys.stderr)
            return EXIT_NOCONV
        dispatch = sol.dispatch()
        label = "deterministic"
    else:
        report = solve_cc_acopf(cfg.net, cfg.adm, cfg.uspec, engine=args.engine,
                                n_mc=args.n_mc, threads=args.threads)
        dispatch = report.dispatch
        label = args.engine
    batch = sample_omega(cfg.uspec, args.samples, kind=args.kind,
                         seed=args.seed)
    stats = evaluate_violations(cfg.net, cfg.adm, dispatch, cfg.uspec, alpha,
                                batch, threads=args.threads)
    print(f"validate[{label}] kind={args.kind} samples={stats.n_samples} "
          f"diverged={stats.n_diverged}")
    print(f"  eps_joint={stats.eps_joint:.4f}")
    for cat in ("p", "q", "v", "i"):
        print(f"  max_eps[{cat}]={stats.max_eps(cat):.4f} "
              f"max_expected_size[{cat}]={stats.max_expected_size(cat):.4g}")
    if args.out:
        data = stats.to_dict()
        data["case"] = cfg.net.name
        data["kind"] = args.kind
        data["dispatch_source"] = label
        write_report(args.out, data)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args, need_uncertainty=True)
    alpha = participation_factors(cfg.net, cfg.uspec)
    rows = []
    for engine in ("analytical", "monte_carlo", "scenario"):
        report = solve_cc_acopf(cfg.net, cfg.adm, cfg.uspec, engine=engine,
                                n_mc=args.n_mc, threads=args.threads)
        batch = sample_omega(cfg.uspec, args.samples, seed=args.seed)
        stats = evaluate_violations(cfg.net, cfg.adm, report.dispatch,
                                    cfg.uspec, alpha, batch,
                                    threads=args.threads)
        rows.append({
            "engine": engine,
            "cost": report.cost,
            "converged": report.converged,
            "outer_iterations": report.n_iterations,
            "max_eps_emp": stats.max_eps(),
            "eps_joint": stats.eps_joint,
        })
    header = (f"{'engine':<12} {'cost $/h':>12} {'outer':>5} "
              f"{'max eps':>8} {'eps_J':>6} conv")
    print(header)
    for r in rows:
        print(f"{r['engine']:<12} {r['cost']:>12.2f} {r['outer_iterations']:>5d} "
              f"{r['max_eps_emp']:>8.4f} {r['eps_joint']:>6.3f} {r['converged']}")
    if args.out:
        write_report(args.out, {"case": cfg.net.name, "samples": args.samples,
                                "engines": rows})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args, need_uncertainty=True)
    eps_values = np.arange(args.eps_min, args.eps_max + args.eps_step / 2,
                           args.eps_step)
    rows = violation_size_sweep(cfg.net, cfg.adm, cfg.uspec,
                                engine=args.engine, eps_values=eps_values,
                                n_samples=args.samples, n_mc=args.n_mc,
                                threads=args.threads, seed=args.seed)
    fields = ["epsilon", "category", "unit", "max_eps_emp",
              "max_expected_size", "eps_joint", "cost", "converged"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"sweep: wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_sensitivities(args) -> int:
    cfg = _load(args, need_uncertainty=True)
    alpha = participation_factors(cfg.net, cfg.uspec)
    dispatch = case_dispatch(cfg.net)
    if args.at_opf:
        sol = solve_acopf(cfg.net, cfg.adm, tighten_bounds(cfg.net))
        if not sol.converged:
            print(f"deterministic opf failed: {sol.status}", file=sys.stderr)
            return EXIT_NOCONV
        dispatch = sol.dispatch()
    if args.check:
        result = check_sensitivities_fd(cfg.net, cfg.adm, dispatch, cfg.uspec,
                                        alpha)
        per_cat = " ".join(f"{k}={v:.2e}" for k, v in result["max_rel"].items())
        print(f"finite-difference check: passed={result['passed']} "
              f"worst={result['worst']:.3e} ({per_cat})")
        if not result["passed"]:
            return EXIT_NOCONV
        return EXIT_OK
    op = solve_power_flow(cfg.net, cfg.adm, dispatch.schedule(cfg.net))
    if not op.converged:
        print("power flow diverged", file=sys.stderr)
        return EXIT_NOCONV
    sens = compute_sensitivities(cfg.net, cfg.adm, op, cfg.uspec, alpha)
    if args.out:
        _write_sensitivity_csv(args.out, cfg.net, cfg.uspec, sens)
        print(f"sensitivities: wrote factors to {args.out}")
    else:
        print(f"sensitivities: {sens.gamma_v.shape[0]} voltage rows, "
              f"{sens.gamma_q.shape[0]} reactive rows, "
              f"{len(cfg.uspec.src_bus)} sources")
    return EXIT_OK


def _write_sensitivity_csv(path, net, uspec, sens) -> None:
    src_ids = [net.buses[b].id for b in uspec.src_bus]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "source_bus", "value"])

        def dump(prefix, row_ids, factors):
            for rid, row in zip(row_ids, factors):
                for sid, val in zip(src_ids, row):
                    writer.writerow([f"{prefix}:{rid}", sid, f"{val:.10g}"])

        dump("v:bus", [net.buses[b].id for b in sens.pq_buses], sens.gamma_v)
        dump("q:bus", [net.buses[g.bus].id for g in net.gens], sens.gamma_q)
        dump("p_slack:bus", [net.buses[net.slack].id], [sens.gamma_p_slack])
        br_ids = [f"{net.buses[br.f].id}-{net.buses[br.t].id}"
                  for br in net.branches]
        dump("i_from:branch", br_ids, sens.gamma_i_f)
        dump("i_to:branch", br_ids, sens.gamma_i_t)


def _add_common(p, uncertainty_required: bool = False) -> None:
    p.add_argument("--case", required=True, help="case file (.m)")
    p.add_argument("--recipe", help="JSON recipe deriving the stochastic case")
    p.add_argument("--uncertainty", required=uncertainty_required,
                   help="uncertainty description JSON")
    p.add_argument("--out", help="write a JSON report here")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for sampling")
    p.add_argument("--seed", type=int, default=None,
                   help="override the sampling seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ccopf",
        description="Chance-constrained AC optimal power flow toolkit",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", help="solve the power flow at the case dispatch")
    _add_common(p)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("opf", help="solve the deterministic optimal power flow")
    _add_common(p)
    p.set_defaults(func=cmd_opf)

    p = sub.add_parser("solve", help="solve the chance-constrained optimum")
    _add_common(p, uncertainty_required=True)
    p.add_argument("--engine", default="analytical",
                   choices=["analytical", "monte_carlo", "scenario"])
    p.add_argument("--n-mc", type=int, default=1000,
                   help="samples per Monte-Carlo margin pass")
    p.add_argument("--n-scenarios", type=int, default=None,
                   help="override the scenario count")
    p.add_argument("--max-outer", type=int, default=None,
                   help="outer iteration limit")
    p.add_argument("--margins-csv", help="write final margins here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="Monte-Carlo validation of a dispatch")
    _add_common(p, uncertainty_required=True)
    p.add_argument("--engine", default="analytical",
                   choices=["analytical", "monte_carlo", "scenario",
                            "deterministic"],
                   help="solve with this engine before validating")
    p.add_argument("--dispatch", help="validate the dispatch in this JSON file")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--kind", default="gaussian",
                   choices=["gaussian", "laplace"])
    p.add_argument("--n-mc", type=int, default=1000)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="run every margin engine and validate")
    _add_common(p, uncertainty_required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--n-mc", type=int, default=1000)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="violation size versus tolerance")
    _add_common(p, uncertainty_required=True)
    p.add_argument("--engine", default="analytical",
                   choices=["analytical", "monte_carlo", "scenario"])
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--n-mc", type=int, default=1000)
    p.add_argument("--eps-min", type=float, default=0.01)
    p.add_argument("--eps-max", type=float, default=0.15)
    p.add_argument("--eps-step", type=float, default=0.01)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sensitivities",
                       help="response factors of monitored quantities")
    _add_common(p, uncertainty_required=True)
    p.add_argument("--check", action="store_true",
                   help="finite-difference validation instead of a dump")
    p.add_argument("--at-opf", action="store_true",
                   help="evaluate at the deterministic optimum")
    p.set_defaults(func=cmd_sensitivities)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "sweep" and not args.out:
        ap.error("sweep requires --out for the CSV")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BADINPUT
    except CaseFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BADINPUT
    except InfeasibleBoundsError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergedSamplesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except (RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
