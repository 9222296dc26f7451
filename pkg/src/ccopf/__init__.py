"""Chance-constrained AC optimal power flow toolkit.

Solves AC optimal power flow with probabilistic limits on generator
outputs, voltages and branch currents under correlated injection
uncertainty, by iteratively tightening the deterministic limits with
uncertainty margins. Three interchangeable margin engines (analytical,
Monte-Carlo, scenario) and a Monte-Carlo validation harness are included.
"""

from .acopf import (
    InfeasibleBoundsError,
    OPFSolution,
    TightenedBounds,
    evaluate_objective,
    solve_acopf,
    tighten_bounds,
)
from .caseio import (
    CaseFormatError,
    Epsilons,
    RawCaseTables,
    UncertaintySpecFile,
    canonical_json,
    derive_stochastic_case,
    load_recipe,
    parse_case,
    parse_uncertainty,
    write_case,
    write_report,
)
from .driver import (
    ConvergenceCriteria,
    SolveReport,
    compute_eta,
    participation_factors,
    solve_cc_acopf,
)
from .margins import (
    MarginSamplingError,
    UncertaintyMargins,
    analytical_margins,
    monte_carlo_margins,
    quantile_multiplier,
    scenario_margins,
    scenario_sample_count,
    sigma_omega,
    write_margins_csv,
)
from .network import (
    AdmittanceMatrix,
    CostCurve,
    NetworkCase,
    UncertaintySpec,
    bind_uncertainty,
    branch_current_magnitudes,
    build_admittance,
    build_network,
    gamma_from_power_factor,
    merit_order_aggregate,
    sqrt_psd,
)
from .powerflow import (
    Dispatch,
    OperatingPoint,
    PFSchedule,
    case_dispatch,
    make_schedule,
    solve_power_flow,
)
from .sensitivity import (
    SensitivityFactors,
    check_sensitivities_fd,
    compute_sensitivities,
)
from .validation import (
    DivergedSamplesError,
    SampleSet,
    ViolationStats,
    apply_response,
    evaluate_violations,
    monitored_quantities,
    sample_omega,
    violation_size_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "AdmittanceMatrix",
    "CaseFormatError",
    "ConvergenceCriteria",
    "CostCurve",
    "Dispatch",
    "DivergedSamplesError",
    "Epsilons",
    "InfeasibleBoundsError",
    "MarginSamplingError",
    "NetworkCase",
    "OPFSolution",
    "OperatingPoint",
    "PFSchedule",
    "RawCaseTables",
    "SampleSet",
    "SensitivityFactors",
    "SolveReport",
    "TightenedBounds",
    "UncertaintyMargins",
    "UncertaintySpec",
    "UncertaintySpecFile",
    "ViolationStats",
    "apply_response",
    "analytical_margins",
    "bind_uncertainty",
    "branch_current_magnitudes",
    "build_admittance",
    "build_network",
    "canonical_json",
    "case_dispatch",
    "check_sensitivities_fd",
    "compute_eta",
    "compute_sensitivities",
    "derive_stochastic_case",
    "evaluate_objective",
    "evaluate_violations",
    "gamma_from_power_factor",
    "load_recipe",
    "make_schedule",
    "merit_order_aggregate",
    "monitored_quantities",
    "monte_carlo_margins",
    "parse_case",
    "parse_uncertainty",
    "participation_factors",
    "quantile_multiplier",
    "sample_omega",
    "scenario_margins",
    "scenario_sample_count",
    "sigma_omega",
    "solve_acopf",
    "solve_cc_acopf",
    "solve_power_flow",
    "sqrt_psd",
    "tighten_bounds",
    "violation_size_sweep",
    "write_case",
    "write_margins_csv",
    "write_report",
]
