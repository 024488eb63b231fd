"""Primal-dual controllers: deterministic joint control-estimation, the
measurement-feedback baseline, and the risk-regularized stochastic variant.

One step advances the whole iterate (u, z, tau, dual).  The deterministic
step updates all blocks from the incoming iterate; the stochastic step
follows the operator/end-user ordering of the online algorithm (estimate
first, then duals from the fresh estimate, then the device-side primal
blocks from the fresh duals).  Voltage knowledge enters every constraint
term through the current estimate; the primal pullback uses the constant
sensitivity matrix, which is exact for the linear model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .devices import DerCapability, fleet_project
from .estimation import estimated_voltage, se_gradient
from .network import FeederModel, InjectionVector, LinearVoltageModel, predict_voltage, DistflowSolver
from .sensing import MeasurementSnapshot, ScenarioSet, SensorConfig, sample_measurements

MODES = ("deterministic", "stochastic", "measured")


@dataclass(frozen=True)
class OpfCost:
    """Quadratic generation cost sum_i w_p (p_ref - p)^2 + w_q q^2 per node."""

    p_ref: np.ndarray
    w_p: np.ndarray
    w_q: np.ndarray

    def __post_init__(self):
        for name in ("p_ref", "w_p", "w_q"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.w_p <= 0) or np.any(self.w_q <= 0):
            raise ValueError("cost weights must be strictly positive")

    @classmethod
    def curtailment(cls, p_ref, w_p: float = 1.0, w_q: float = 3.0) -> "OpfCost":
        p_ref = np.asarray(p_ref, dtype=float)
        n = len(p_ref)
        return cls(p_ref=p_ref, w_p=np.full(n, w_p), w_q=np.full(n, w_q))

    def value(self, u) -> float:
        n = len(self.p_ref)
        p, q = u[:n], u[n:]
        return float(self.w_p @ (self.p_ref - p) ** 2 + self.w_q @ q**2)

    def gradient(self, u) -> np.ndarray:
        n = len(self.p_ref)
        return np.concatenate([2.0 * self.w_p * (u[:n] - self.p_ref), 2.0 * self.w_q * u[n:]])

    def hessian_diag(self) -> np.ndarray:
        return np.concatenate([2.0 * self.w_p, 2.0 * self.w_q])


@dataclass(frozen=True)
class VoltageLimits:
    v_max: np.ndarray
    v_min: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v_max", np.asarray(self.v_max, dtype=float))
        object.__setattr__(self, "v_min", np.asarray(self.v_min, dtype=float))
        if np.any(self.v_min >= self.v_max):
            raise ValueError("v_min must be below v_max elementwise")

    @classmethod
    def uniform(cls, n: int, v_max: float = 1.045, v_min: float = 0.95) -> "VoltageLimits":
        return cls(v_max=np.full(n, v_max), v_min=np.full(n, v_min))


@dataclass(frozen=True)
class StepSizes:
    """Per-block gradient steps plus the Tikhonov weights phi (dual) and nu (tau)."""

    eps_u: float = 8e-4
    eps_z: float = 9e-4
    eps_tau: float = 3e-3
    eps_dual: float = 5e-3
    phi: float = 1e-4
    nu: float = 1e-4

    def __post_init__(self):
        if min(self.eps_u, self.eps_z, self.eps_tau, self.eps_dual) <= 0:
            raise ValueError("step sizes must be positive")
        if self.phi < 0 or self.nu < 0:
            raise ValueError("regularization weights must be nonnegative")

    @classmethod
    def uniform(cls, eps: float, phi: float = 1e-4, nu: float = 1e-4) -> "StepSizes":
        return cls(eps_u=eps, eps_z=eps, eps_tau=eps, eps_dual=eps, phi=phi, nu=nu)


@dataclass(frozen=True)
class AlgorithmState:
    """Stacked iterate: setpoints u, estimate z, risk auxiliaries tau, multipliers."""

    u: np.ndarray
    z: np.ndarray
    tau: np.ndarray
    dual: np.ndarray

    @classmethod
    def zeros(cls, n_nodes: int) -> "AlgorithmState":
        two_n = 2 * n_nodes
        return cls(np.zeros(two_n), np.zeros(two_n), np.zeros(two_n), np.zeros(two_n))

    def stack(self) -> np.ndarray:
        return np.concatenate([self.u, self.z, self.tau, self.dual])

    @classmethod
    def unstack(cls, vec, n_nodes: int) -> "AlgorithmState":
        two_n = 2 * n_nodes
        parts = np.split(np.asarray(vec, dtype=float), [two_n, 2 * two_n, 3 * two_n])
        return cls(*parts)


def voltage_constraint(v, limits: VoltageLimits) -> np.ndarray:
    """Stacked limit residuals [v - v_max; v_min - v]; feasibility is <= 0."""
    v = np.asarray(v, dtype=float)
    return np.concatenate([v - limits.v_max, limits.v_min - v])


def constraint_matrix(model: LinearVoltageModel) -> np.ndarray:
    """Sensitivity of the stacked constraint to injections: [[R, X], [-R, -X]]."""
    top = np.hstack([model.R, model.X])
    return np.vstack([top, -top])


def _project_controllable(u, fleet, n_nodes: int) -> np.ndarray:
    """Project DER slots onto their capability sets; pin other nodes at zero."""
    out = np.zeros(2 * n_nodes)
    if not fleet:
        return out
    idx = np.array([c.node - 1 for c in fleet])
    pts = np.column_stack([u[idx], u[n_nodes + idx]])
    proj = fleet_project(pts, fleet)
    out[idx] = proj[:, 0]
    out[n_nodes + idx] = proj[:, 1]
    return out


def joint_step_deterministic(
    state: AlgorithmState,
    m: MeasurementSnapshot,
    model: LinearVoltageModel,
    fleet,
    cost: OpfCost,
    limits: VoltageLimits,
    steps: StepSizes,
) -> AlgorithmState:
    """One deterministic joint step: projected primal descent on the cost plus
    the dual pullback, a dual ascent on the limit residuals at the estimated
    voltages, and one estimator gradient step.  All blocks read the incoming
    iterate."""
    n = model.n_nodes
    H = constraint_matrix(model)
    grad_u = cost.gradient(state.u) + H.T @ state.dual
    u_new = _project_controllable(state.u - steps.eps_u * grad_u, fleet, n)
    r = voltage_constraint(estimated_voltage(state.z, model), limits)
    dual_new = np.maximum(0.0, state.dual + steps.eps_dual * (r - steps.phi * state.dual))
    z_new = state.z - steps.eps_z * se_gradient(state.z, m, model)
    return AlgorithmState(u=u_new, z=z_new, tau=state.tau, dual=dual_new)


def joint_step_measured(
    state: AlgorithmState,
    v_measured,
    m: MeasurementSnapshot,
    model: LinearVoltageModel,
    fleet,
    cost: OpfCost,
    limits: VoltageLimits,
    steps: StepSizes,
) -> AlgorithmState:
    """Baseline with full voltage feedback: the dual update reads a measured
    voltage vector for every node instead of the estimate.  Only available in
    simulation, where the plant is known."""
    n = model.n_nodes
    v_measured = np.asarray(v_measured, dtype=float)
    if len(v_measured) != n:
        raise ValueError("measured-feedback baseline needs a full voltage vector")
    H = constraint_matrix(model)
    grad_u = cost.gradient(state.u) + H.T @ state.dual
    u_new = _project_controllable(state.u - steps.eps_u * grad_u, fleet, n)
    r = voltage_constraint(v_measured, limits)
    dual_new = np.maximum(0.0, state.dual + steps.eps_dual * (r - steps.phi * state.dual))
    z_new = state.z - steps.eps_z * se_gradient(state.z, m, model)
    return AlgorithmState(u=u_new, z=z_new, tau=state.tau, dual=dual_new)


def cvar_constraint(v, tau, scen: ScenarioSet, limits: VoltageLimits) -> np.ndarray:
    """Sample-average risk residuals, one per limit.

    Upper block: mean_s [v - v_max + xi_s + tau_up]_+ - beta tau_up, and the
    mirrored lower block.  Nonpositive means the empirical tail risk of a
    limit violation is within beta.
    """
    v = np.asarray(v, dtype=float)
    n = len(v)
    tau = np.asarray(tau, dtype=float)
    if len(tau) != 2 * n:
        raise ValueError(f"tau must have length {2 * n}")
    t_up, t_lo = tau[:n], tau[n:]
    up = np.maximum(0.0, (v - limits.v_max + t_up)[None, :] + scen.samples).mean(axis=0)
    lo = np.maximum(0.0, (limits.v_min - v + t_lo)[None, :] - scen.samples).mean(axis=0)
    return np.concatenate([up - scen.beta * t_up, lo - scen.beta * t_lo])


def cvar_active_fractions(v, tau, scen: ScenarioSet, limits: VoltageLimits):
    """Fraction of samples with a strictly active hinge, per node and limit side.

    Samples exactly at the kink contribute zero (a valid subgradient choice).
    """
    v = np.asarray(v, dtype=float)
    n = len(v)
    t_up, t_lo = tau[:n], tau[n:]
    f_up = ((v - limits.v_max + t_up)[None, :] + scen.samples > 0).mean(axis=0)
    f_lo = ((limits.v_min - v + t_lo)[None, :] - scen.samples > 0).mean(axis=0)
    return f_up, f_lo


def cvar_subgradients(v, tau, scen: ScenarioSet, limits: VoltageLimits, model: LinearVoltageModel):
    """Subgradients of the risk residuals: d_u (2N x 2N) w.r.t. injections and
    d_tau (2N) w.r.t. the auxiliaries, built from the hinge activity fractions."""
    f_up, f_lo = cvar_active_fractions(v, tau, scen, limits)
    fractions = np.concatenate([f_up, f_lo])
    d_u = fractions[:, None] * constraint_matrix(model)
    d_tau = fractions - scen.beta
    return d_u, d_tau


def joint_step_stochastic(
    state: AlgorithmState,
    m: MeasurementSnapshot,
    scen: ScenarioSet,
    model: LinearVoltageModel,
    fleet,
    cost: OpfCost,
    limits: VoltageLimits,
    steps: StepSizes,
    v_constraints=None,
) -> AlgorithmState:
    """One online stochastic step in operator/end-user order.

    The operator refreshes the estimate, evaluates the risk residuals at the
    fresh estimated voltages, updates the (Tikhonov-damped) duals, and
    transmits them; the device side then takes the projected primal step and
    the auxiliary step.  ``v_constraints`` substitutes a known voltage vector
    for the estimate in every constraint term (simulation-only, the
    stochastic analogue of the measured baseline).
    """
    if scen.n_samples < 1:
        raise ValueError("scenario set is empty")
    n = model.n_nodes
    z_new = state.z - steps.eps_z * se_gradient(state.z, m, model)
    v_con = estimated_voltage(z_new, model) if v_constraints is None else np.asarray(v_constraints, dtype=float)
    g = cvar_constraint(v_con, state.tau, scen, limits)
    dual_new = np.maximum(0.0, state.dual + steps.eps_dual * (g - steps.phi * state.dual))
    d_u, d_tau = cvar_subgradients(v_con, state.tau, scen, limits, model)
    grad_u = cost.gradient(state.u) + d_u.T @ dual_new
    u_new = _project_controllable(state.u - steps.eps_u * grad_u, fleet, n)
    tau_new = np.maximum(0.0, state.tau - steps.eps_tau * (d_tau * dual_new + steps.nu * state.tau))
    return AlgorithmState(u=u_new, z=z_new, tau=tau_new, dual=dual_new)


@dataclass
class FrozenProblem:
    """All inputs of one time instant, frozen for fixed-point computations.

    With ``measurements`` set, the estimator sees that snapshot forever.
    Otherwise each step regenerates noise-free measurements from the plant at
    the current setpoints (the linear model by default, the nonlinear solver
    when ``feeder`` is given), closing the estimation loop exactly as the
    online system does.
    """

    model: LinearVoltageModel
    fleet: list[DerCapability]
    cost: OpfCost
    limits: VoltageLimits
    load: InjectionVector
    sensors: SensorConfig = field(default_factory=lambda: SensorConfig.noise_free())
    mode: str = "deterministic"
    scen: ScenarioSet | None = None
    measurements: MeasurementSnapshot | None = None
    feeder: FeederModel | None = None
    constraint_source: str = "estimate"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.constraint_source not in ("estimate", "plant"):
            raise ValueError("constraint_source must be 'estimate' or 'plant'")
        if self.mode == "stochastic" and self.scen is None:
            raise ValueError("stochastic mode needs a scenario set")
        if self.measurements is None:
            if max(self.sensors.sigma_v, self.sensors.sigma_p, self.sensors.sigma_q) > 0:
                raise ValueError("measurement refresh requires noise-free sensors")
        self._solver = DistflowSolver(self.feeder) if self.feeder is not None else None

    @property
    def n_nodes(self) -> int:
        return self.model.n_nodes

    def plant_voltage(self, u) -> np.ndarray:
        n = self.n_nodes
        total = InjectionVector(self.load.p + u[:n], self.load.q + u[n:])
        if self._solver is not None:
            return self._solver.solve(total).v
        return predict_voltage(self.model, total)

    def snapshot_at(self, u) -> MeasurementSnapshot:
        if self.measurements is not None:
            return self.measurements
        n = self.n_nodes
        total = InjectionVector(self.load.p + u[:n], self.load.q + u[n:])
        return sample_measurements(self.plant_voltage(u), total, self.sensors, rng=None)


def step_once(problem: FrozenProblem, state: AlgorithmState, steps: StepSizes) -> AlgorithmState:
    """Apply one joint step under the frozen problem's mode and feedback policy."""
    m = problem.snapshot_at(state.u)
    plant_side = problem.constraint_source == "plant"
    if problem.mode == "deterministic":
        if plant_side:
            v_meas = problem.plant_voltage(state.u)
            return joint_step_measured(state, v_meas, m, problem.model, problem.fleet, problem.cost, problem.limits, steps)
        return joint_step_deterministic(state, m, problem.model, problem.fleet, problem.cost, problem.limits, steps)
    if problem.mode == "measured":
        v_meas = problem.plant_voltage(state.u)
        return joint_step_measured(state, v_meas, m, problem.model, problem.fleet, problem.cost, problem.limits, steps)
    v_con = problem.plant_voltage(state.u) if plant_side else None
    return joint_step_stochastic(
        state, m, problem.scen, problem.model, problem.fleet, problem.cost, problem.limits, steps,
        v_constraints=v_con,
    )


@dataclass
class StaticSolution:
    state: AlgorithmState
    iterations: int
    converged: bool
    displacement: float


def solve_static(
    problem: FrozenProblem,
    steps: StepSizes,
    tol: float = 1e-10,
    max_iters: int = 500_000,
    state0: AlgorithmState | None = None,
) -> StaticSolution:
    """Iterate the joint step at frozen inputs until the iterate stops moving.

    Returns the best iterate with ``converged=False`` if the cap is reached.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    state = AlgorithmState.zeros(problem.n_nodes) if state0 is None else state0
    prev = state.stack()
    for it in range(1, max_iters + 1):
        state = step_once(problem, state, steps)
        cur = state.stack()
        disp = float(np.linalg.norm(cur - prev))
        if disp < tol:
            return StaticSolution(state=state, iterations=it, converged=True, displacement=disp)
        prev = cur
    return StaticSolution(state=state, iterations=max_iters, converged=False, displacement=disp)
