"""Attack design: craft an interior state that respects every zone constraint,
then translate it into additive measurement deltas.

Two modes:
  optimal   - minimize the squared interior state deviation from the base
              point subject to the constraints; the stealthiest attack that
              still meets the overload targets.
  arbitrary - pure feasibility from a seeded random interior perturbation;
              respects the same constraints but lands far from the base
              point, trading stealth margin for impact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .estimation import MeasurementKey, eval_h, eval_jacobian, full_layout
from .network import AdmittanceModel, Branch, NetworkCase, build_admittance
from .nlsolver import SolverError, solve_constrained
from .powerflow import StateVector, all_injections, branch_flow
from .zones import AttackZone


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class OverloadTarget:
    """Require the from-end active flow of a branch to reach factor x base flow."""

    from_bus: int
    to_bus: int
    factor: float


@dataclass(frozen=True)
class SolverParams:
    tol_eq: float = 1e-6
    tol_step: float = 1e-12
    max_outer: int = 20
    max_inner: int = 60
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    seed: int = 0
    ang_perturbation: float = 0.35  # radians, arbitrary-mode start
    mag_perturbation: float = 0.05  # p.u., arbitrary-mode start
    vm_relax: float = 0.1  # widening of magnitude bounds in arbitrary mode
    overload_margin: float = 1e-4  # strict-feasibility offset on the overload bound
    max_start_draws: int = 100


@dataclass(frozen=True)
class AttackSpec:
    zone: AttackZone
    targets: tuple[OverloadTarget, ...]
    mode: str  # 'optimal' | 'arbitrary'
    params: SolverParams = field(default_factory=SolverParams)

    def __post_init__(self):
        if self.mode not in ("optimal", "arbitrary"):
            raise AttackError(f"unknown attack mode {self.mode!r}")
        for t in self.targets:
            if t.factor <= 0:
                raise AttackError(f"overload factor must be positive, got {t.factor}")


@dataclass(frozen=True)
class AttackVector:
    """Additive measurement-space attack consistent with a shifted state.

    x_attacked differs from x_base only on zone-interior buses; every delta
    equals the measurement function evaluated at both states and subtracted,
    so appending the deltas to consistent data keeps it consistent.
    """

    x_base: StateVector
    x_attacked: StateVector
    deltas: dict[str, float]
    falsified_injections: dict[int, tuple[float, float]]
    solver_info: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "x_base": self.x_base.to_dict(),
                "x_attacked": self.x_attacked.to_dict(),
                "deltas": dict(sorted(self.deltas.items())),
                "falsified_injections": {
                    str(b): [p, q] for b, (p, q) in sorted(self.falsified_injections.items())
                },
                "solver_info": self.solver_info,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "AttackVector":
        doc = json.loads(text)
        return cls(
            x_base=StateVector.from_dict(doc["x_base"]),
            x_attacked=StateVector.from_dict(doc["x_attacked"]),
            deltas=dict(doc["deltas"]),
            falsified_injections={
                int(b): (pq[0], pq[1]) for b, pq in doc["falsified_injections"].items()
            },
            solver_info=doc["solver_info"],
        )


def _find_branch(case: NetworkCase, from_bus: int, to_bus: int) -> Branch:
    for br in case.in_service_branches():
        if br.from_bus == from_bus and br.to_bus == to_bus:
            return br
    raise AttackError(f"no in-service branch {from_bus}-{to_bus}")


def _in_service_position(case: NetworkCase) -> dict[int, int]:
    """source-table branch index -> position in the in-service list."""
    return {br.index: k for k, br in enumerate(case.in_service_branches())}


def _interior_columns(case: NetworkCase, interior: list[int]) -> np.ndarray:
    """Columns of the full (angle|magnitude) Jacobian owned by interior buses."""
    slack = case.slack_bus
    non_slack = [b.id for b in case.buses if b.id != slack]
    ang_col = {b: i for i, b in enumerate(non_slack)}
    n_ang = len(non_slack)
    mag_col = {b.id: n_ang + i for i, b in enumerate(case.buses)}
    cols = [ang_col[b] for b in interior] + [mag_col[b] for b in interior]
    return np.array(cols, dtype=int)


def design_attack(
    case: NetworkCase,
    base: StateVector,
    spec: AttackSpec,
    adm: AdmittanceModel | None = None,
    layout: tuple[MeasurementKey, ...] | None = None,
) -> AttackVector:
    """Solve the attack-design problem and assemble the measurement deltas.

    Decision variables are (angle, magnitude) at interior buses plus one
    non-negative slack per overload target. Constraints: zero net injection
    at zero-injection interior buses, from-end active flow of each target at
    or above factor x base (held strictly feasible by a small margin), and
    interior magnitudes inside the case voltage band (widened in arbitrary
    mode). Boundary and exterior states are never touched.
    """
    if adm is None:
        adm = build_admittance(case)
    zone = spec.zone
    params = spec.params
    interior = sorted(zone.interior)
    n_int = len(interior)

    interior_line_idx = {br.index for br in zone.interior_lines}
    target_branches = []
    for t in spec.targets:
        br = _find_branch(case, t.from_bus, t.to_bus)
        if br.index not in interior_line_idx:
            raise AttackError(
                f"target branch {t.from_bus}-{t.to_bus} is not an interior line of the zone"
            )
        target_branches.append(br)

    pos = _in_service_position(case)
    zero_inj = list(zone.zero_injection_interior(case))

    # constraint rows evaluated through the measurement machinery
    con_layout: list[MeasurementKey] = []
    for b in zero_inj:
        con_layout.append(MeasurementKey(f"Pinj:{b}", "Pinj", b, None, None))
        con_layout.append(MeasurementKey(f"Qinj:{b}", "Qinj", b, None, None))
    for br in target_branches:
        con_layout.append(
            MeasurementKey(f"Pf:{br.from_bus}-{br.to_bus}", "Pflow", None, pos[br.index], "from")
        )
    con_layout = tuple(con_layout)

    base_flows = np.array([branch_flow(base, br).pf for br in target_branches])
    bounds_flow = np.array(
        [t.factor * f + params.overload_margin for t, f in zip(spec.targets, base_flows)]
    )

    int_cols = _interior_columns(case, interior)
    va0 = np.array([base.angle(b) for b in interior])
    vm0 = np.array([base.magnitude(b) for b in interior])
    n_targets = len(target_branches)

    def state_of(z: np.ndarray) -> StateVector:
        return base.replace_buses(
            {b: z[n_int + i] for i, b in enumerate(interior)},
            {b: z[i] for i, b in enumerate(interior)},
        )

    def constraints(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        st = state_of(z)
        h = eval_h(adm, st, con_layout)
        jac_full = eval_jacobian(adm, st, con_layout)
        jac = np.zeros((len(con_layout), 2 * n_int + n_targets))
        jac[:, : 2 * n_int] = jac_full[:, int_cols]
        c = h.copy()
        for k in range(n_targets):
            row = 2 * len(zero_inj) + k
            c[row] = h[row] - bounds_flow[k] - z[2 * n_int + k]
            jac[row, 2 * n_int + k] = -1.0
        return c, jac

    def objective(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = np.concatenate([z[:n_int] - va0, z[n_int : 2 * n_int] - vm0])
        jac = np.zeros((2 * n_int, 2 * n_int + n_targets))
        jac[:, : 2 * n_int] = np.eye(2 * n_int)
        return r, jac

    vm_lo = np.array([case.bus(b).vmin for b in interior])
    vm_hi = np.array([case.bus(b).vmax for b in interior])
    if spec.mode == "arbitrary":
        vm_lo = vm_lo - params.vm_relax
        vm_hi = vm_hi + params.vm_relax
    lower = np.concatenate([np.full(n_int, -np.inf), vm_lo, np.zeros(n_targets)])
    upper = np.concatenate([np.full(n_int, np.inf), vm_hi, np.full(n_targets, np.inf)])

    if spec.mode == "optimal":
        z0 = np.concatenate([va0, vm0, np.maximum(base_flows - bounds_flow, 0.0)])
        obj_fn = objective
        start_draws = 0
    else:
        # seeded start; redraw until the overload targets already hold so the
        # feasibility solve is not dragged down onto the overload bound
        rng = np.random.default_rng(params.seed)
        z0 = None
        start_draws = 0
        for _ in range(max(1, params.max_start_draws)):
            start_draws += 1
            va_try = va0 + rng.uniform(-params.ang_perturbation, params.ang_perturbation, n_int)
            vm_try = np.clip(
                vm0 + rng.uniform(-params.mag_perturbation, params.mag_perturbation, n_int),
                vm_lo,
                vm_hi,
            )
            z_try = np.concatenate([va_try, vm_try, np.zeros(n_targets)])
            flows = np.array(
                [branch_flow(state_of(z_try), br).pf for br in target_branches]
            )
            z_try[2 * n_int :] = np.maximum(flows - bounds_flow, 0.0)
            z0 = z_try
            if np.all(flows >= bounds_flow):
                break
        obj_fn = None

    try:
        result = solve_constrained(
            z0,
            constraints=constraints,
            objective=obj_fn,
            lower=lower,
            upper=upper,
            tol_eq=params.tol_eq,
            tol_step=params.tol_step,
            max_outer=params.max_outer,
            max_inner=params.max_inner,
            penalty0=params.penalty0,
            penalty_growth=params.penalty_growth,
        )
    except SolverError as exc:
        raise AttackError(f"{spec.mode} attack design infeasible: {exc}") from exc

    x_attacked = state_of(result.z)
    info = {
        "mode": spec.mode,
        "targets": [
            {"from": t.from_bus, "to": t.to_bus, "factor": t.factor} for t in spec.targets
        ],
        "max_violation": result.max_violation,
        "objective": result.objective,
        "outer_iterations": result.outer_iterations,
        "inner_iterations": result.inner_iterations,
        "start_draws": start_draws,
        "target_flows": [float(branch_flow(x_attacked, br).pf) for br in target_branches],
        "target_bounds": [float(b) for b in bounds_flow],
    }
    return assemble_attack_vector(case, base, x_attacked, zone, layout, adm, solver_info=info)


def compute_falsified_injections(
    case: NetworkCase,
    base: StateVector,
    x_attacked: StateVector,
    zone: AttackZone,
    adm: AdmittanceModel | None = None,
) -> dict[int, tuple[float, float]]:
    """What each zone bus must appear to inject after the attack.

    Non-zero-injection zone buses report their base injection plus the sum of
    interior-line flow changes on lines touching them; zero-injection interior
    buses stay at exactly (0, 0); inert boundary buses keep their base values.
    """
    if adm is None:
        adm = build_admittance(case)
    p_base, q_base = all_injections(base, adm)

    incident: dict[int, list[tuple[Branch, str]]] = {b: [] for b in zone.buses}
    for br in zone.interior_lines:
        incident[br.from_bus].append((br, "from"))
        incident[br.to_bus].append((br, "to"))

    out: dict[int, tuple[float, float]] = {}
    for bus in sorted(zone.buses):
        i = case.bus_index(bus)
        if bus in zone.interior and not case.has_injection(bus):
            out[bus] = (0.0, 0.0)
            continue
        if bus in zone.inert_boundary:
            out[bus] = (float(p_base[i]), float(q_base[i]))
            continue
        dp = dq = 0.0
        for br, side in incident[bus]:
            f_att = branch_flow(x_attacked, br)
            f_old = branch_flow(base, br)
            if side == "from":
                dp += f_att.pf - f_old.pf
                dq += f_att.qf - f_old.qf
            else:
                dp += f_att.pt - f_old.pt
                dq += f_att.qt - f_old.qt
        out[bus] = (float(p_base[i] + dp), float(q_base[i] + dq))
    return out


def assemble_attack_vector(
    case: NetworkCase,
    base: StateVector,
    x_attacked: StateVector,
    zone: AttackZone,
    layout: tuple[MeasurementKey, ...] | None = None,
    adm: AdmittanceModel | None = None,
    solver_info: dict | None = None,
) -> AttackVector:
    """Populate the per-measurement deltas for everything the attack touches:
    interior V and angle readings, both ends of interior-line flows, and zone
    bus injections. Every other measurement keeps a zero delta (omitted)."""
    if adm is None:
        adm = build_admittance(case)
    if layout is None:
        layout = full_layout(case)

    for b in base.bus_ids:
        if b in zone.interior:
            continue
        if base.magnitude(b) != x_attacked.magnitude(b) or base.angle(b) != x_attacked.angle(b):
            raise AttackError(f"attacked state moves non-interior bus {b}")

    pos = _in_service_position(case)
    interior_positions = {pos[br.index] for br in zone.interior_lines}

    by_id = {k.id: k for k in layout}
    tag_of = {
        k.branch_index: k.id.split(":", 1)[1]
        for k in layout
        if k.kind == "Pflow" and k.side == "from"
    }
    affected: list[MeasurementKey] = []

    def require(meas_id: str) -> None:
        key = by_id.get(meas_id)
        if key is None:
            raise AttackError(
                f"measurement layout is missing {meas_id!r}, which the attack must alter"
            )
        affected.append(key)

    for br in zone.interior_lines:
        k = pos[br.index]
        tag = tag_of.get(k)
        if tag is None:
            raise AttackError(
                f"measurement layout is missing flow readings for interior line "
                f"{br.from_bus}-{br.to_bus}"
            )
        for prefix in ("Pf", "Pt", "Qf", "Qt"):
            require(f"{prefix}:{tag}")
    for bus in sorted(zone.buses):
        require(f"Pinj:{bus}")
        require(f"Qinj:{bus}")
    for bus in sorted(zone.interior):
        require(f"Vmag:{bus}")
        require(f"Vang:{bus}")

    sub_layout = tuple(affected)
    h_att = eval_h(adm, x_attacked, sub_layout)
    h_base = eval_h(adm, base, sub_layout)
    deltas = {k.id: float(d) for k, d in zip(sub_layout, h_att - h_base)}

    return AttackVector(
        x_base=base,
        x_attacked=x_attacked,
        deltas=deltas,
        falsified_injections=compute_falsified_injections(case, base, x_attacked, zone, adm),
        solver_info=solver_info or {},
    )


def apply_attack(ms, av: AttackVector):
    """Shift measurement values by the attack deltas; variances stay put."""
    values = ms.values().copy()
    for meas_id, delta in av.deltas.items():
        try:
            idx = ms.index_of(meas_id)
        except Exception:
            raise AttackError(f"measurement set has no id {meas_id!r}") from None
        values[idx] += delta
    return ms.with_values(values)
