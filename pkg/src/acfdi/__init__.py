"""AC false data injection attack studio for transmission networks.

Builds undetectable measurement attacks against weighted-least-squares state
estimation, checks them against residual-based bad data detection, and
quantifies the resulting line-flow impact.
"""

from .attacks import (
    AttackError,
    AttackSpec,
    AttackVector,
    OverloadTarget,
    SolverParams,
    apply_attack,
    assemble_attack_vector,
    compute_falsified_injections,
    design_attack,
)
from .estimation import (
    BddPolicy,
    BddVerdict,
    EstimationError,
    EstimationResult,
    Measurement,
    MeasurementSet,
    chi_square_test,
    chi_square_threshold,
    eval_h,
    eval_jacobian,
    full_layout,
    generate_measurements,
    largest_normalized_residual,
    wls_estimate,
)
from .impact import ImpactReport, compute_impact, render_report, replay_attacked_flows
from .network import (
    AdmittanceModel,
    Branch,
    Bus,
    CaseError,
    CaseParseError,
    CaseValidationError,
    Gen,
    NetworkCase,
    build_admittance,
    case_from_json,
    case_to_json,
    load_bundled_case39,
    load_case,
    parse_case,
)
from .powerflow import (
    BranchFlow,
    PowerFlowError,
    StateVector,
    branch_flow,
    bus_injection,
    newton_power_flow,
    solve_power_flow,
)
from .zones import AttackZone, ZoneError, build_zone, validate_zone

__version__ = "0.1.0"

__all__ = [
    "AdmittanceModel",
    "AttackError",
    "AttackSpec",
    "AttackVector",
    "AttackZone",
    "BddPolicy",
    "BddVerdict",
    "Branch",
    "BranchFlow",
    "Bus",
    "CaseError",
    "CaseParseError",
    "CaseValidationError",
    "EstimationError",
    "EstimationResult",
    "Gen",
    "ImpactReport",
    "Measurement",
    "MeasurementSet",
    "NetworkCase",
    "OverloadTarget",
    "PowerFlowError",
    "SolverParams",
    "StateVector",
    "ZoneError",
    "apply_attack",
    "assemble_attack_vector",
    "branch_flow",
    "build_admittance",
    "build_zone",
    "bus_injection",
    "case_from_json",
    "case_to_json",
    "chi_square_test",
    "chi_square_threshold",
    "compute_falsified_injections",
    "compute_impact",
    "design_attack",
    "eval_h",
    "eval_jacobian",
    "full_layout",
    "generate_measurements",
    "largest_normalized_residual",
    "load_bundled_case39",
    "load_case",
    "newton_power_flow",
    "parse_case",
    "render_report",
    "replay_attacked_flows",
    "solve_power_flow",
    "validate_zone",
    "wls_estimate",
    "__version__",
]
