"""End-to-end theory certification on a configured instance.

Freezes one step of the configured scenario and checks, numerically: operator
monotonicity/Lipschitz constants and the step-size bound, fixed-point
optimality (projected-step residual, setpoint/estimate voltage agreement,
two-start uniqueness), the regularization-error bound, and the online
tracking bound on a short window.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    deterministic_operator,
    estimate_constants,
    exact_affine_constants,
    kkt_residual,
    make_domain_sampler,
    max_step_size,
    regularization_gap,
    stochastic_operator,
    tracking_report,
)
from .control import (
    AlgorithmState,
    FrozenProblem,
    OpfCost,
    StepSizes,
    VoltageLimits,
    solve_static,
    step_once,
)
from .estimation import estimated_voltage, se_hessian
from .network import InjectionVector, predict_voltage
from .runner import SimulationConfig, load_inputs, _fleet_at
from .sensing import SensorConfig, draw_error_samples


def frozen_problem_at(cfg: SimulationConfig, step: int, mode: str = "deterministic", **kwargs) -> FrozenProblem:
    """Build the frozen problem of one scenario step (noise-free feedback)."""
    feeder, fleet, model, series, p_av_all = load_inputs(cfg)
    n = feeder.n_nodes
    k = min(step, series.n_steps - 1)
    caps = _fleet_at(fleet, p_av_all[k])
    p_ref = np.zeros(n)
    p_ref[[c.node - 1 for c in caps]] = p_av_all[k]
    scen = None
    if mode == "stochastic":
        scen = draw_error_samples(
            cfg.sigma_xi, cfg.n_samples, n, np.random.default_rng(cfg.sample_seed), beta=cfg.beta
        )
    return FrozenProblem(
        model=model,
        fleet=caps,
        cost=OpfCost.curtailment(p_ref, w_p=cfg.w_p, w_q=cfg.w_q),
        limits=VoltageLimits.uniform(n, v_max=cfg.v_max, v_min=cfg.v_min),
        load=InjectionVector(series.p_load[k], series.q_load[k]),
        sensors=SensorConfig.noise_free(cfg.sensors.voltage_nodes),
        mode=mode,
        scen=scen,
        **kwargs,
    )


def solver_steps(problem: FrozenProblem, phi: float | None = None, nu: float | None = None) -> StepSizes:
    """Per-block steps sized from the problem curvatures for fast static solves."""
    m = problem.snapshot_at(np.zeros(2 * problem.n_nodes))
    lmax_se = float(np.linalg.eigvalsh(se_hessian(m, problem.model))[-1])
    lmax_u = float(np.max(problem.cost.hessian_diag()))
    eps_u = 0.5 / lmax_u
    return StepSizes(
        eps_u=eps_u,
        eps_z=1.0 / lmax_se,
        eps_tau=eps_u,
        eps_dual=eps_u,
        phi=1e-4 if phi is None else phi,
        nu=1e-4 if nu is None else nu,
    )


@dataclass
class CertificationReport:
    values: dict
    lines: list[str]

    def machine_lines(self) -> list[str]:
        return [f"{k}={v}" for k, v in sorted(self.values.items())]


def run_certification(
    cfg: SimulationConfig,
    freeze_step: int | None = None,
    n_pairs: int = 2000,
    tracking_steps: int = 120,
    tol: float = 1e-10,
    reg_phi: float = 1e-3,
    reg_nu: float = 1e-3,
    grad_samples: int = 2000,
    seed: int = 0,
) -> CertificationReport:
    values: dict = {}
    lines: list[str] = []

    _, _, _, series, _ = load_inputs(cfg)
    k0 = series.n_steps // 2 if freeze_step is None else freeze_step
    values["freeze_step"] = k0

    # Operator constants and the admissible step bound (deterministic dynamics).
    det = frozen_problem_at(cfg, k0, mode="deterministic")
    op = deterministic_operator(det, solver_steps(det))
    m_exact, l_exact = exact_affine_constants(op.matrix)
    sampler = make_domain_sampler(det, mode="deterministic")
    consts = estimate_constants(op, sampler, n_pairs=max(n_pairs, 100), seed=seed)
    bound_eps = max_step_size(consts)
    values.update(
        m_sampled=consts.m_hat, l_sampled=consts.l_hat,
        m_exact=m_exact, l_exact=l_exact, step_size_bound=bound_eps,
        monotone_satisfied=consts.m_hat >= 0.0,
    )
    lines.append(
        f"operator constants: sampled (M={consts.m_hat:.6g}, L={consts.l_hat:.6g}), "
        f"exact (M={m_exact:.6g}, L={l_exact:.6g}); step bound 2M/L^2 = {bound_eps:.6g}"
    )

    # Fixed-point optimality and uniqueness at the frozen instant.
    steps = solver_steps(det)
    sol_a = solve_static(det, steps, tol=tol)
    start_b = AlgorithmState.zeros(det.n_nodes)
    u_hot = np.zeros(2 * det.n_nodes)
    for cap in det.fleet:
        u_hot[cap.node - 1] = cap.p_av
    sol_b = solve_static(det, steps, tol=tol, state0=replace(start_b, u=u_hot))
    res = kkt_residual(sol_a.state, det, steps)
    n = det.n_nodes
    v_u = det.plant_voltage(sol_a.state.u)
    v_z = estimated_voltage(sol_a.state.z, det.model)
    v_gap = float(np.max(np.abs(v_u - v_z)))
    two_start = float(np.linalg.norm(sol_a.state.stack() - sol_b.state.stack()))
    values.update(
        kkt_residual=res, voltage_match=v_gap, two_start_gap=two_start,
        fixed_point_converged=sol_a.converged and sol_b.converged,
        kkt_satisfied=res <= 1e-6, voltage_match_satisfied=v_gap <= 1e-6,
        uniqueness_satisfied=two_start <= 1e-8,
    )
    lines.append(
        f"fixed point: projected-step residual {res:.3e}, setpoint/estimate voltage gap {v_gap:.3e}, "
        f"two-start distance {two_start:.3e} ({sol_a.iterations}/{sol_b.iterations} iters)"
    )

    # Regularization error bound on the stochastic problem.
    sto = frozen_problem_at(cfg, k0, mode="stochastic", constraint_source="plant")
    reg = regularization_gap(
        sto, phi=reg_phi, nu=reg_nu, steps=solver_steps(sto),
        tol=max(tol, 1e-11), n_grad_samples=grad_samples, seed=seed,
    )
    values.update(
        reg_gap_measured=reg.measured, reg_gap_bound=reg.bound,
        reg_gap_satisfied=reg.satisfied,
        reg_gap_sharp_satisfied=bool(reg.ingredients["sharp_satisfied"]),
        reg_gap_phi_sq=reg.ingredients["gap_phi_sq"],
        reg_gap_term2=reg.ingredients["term2"],
    )
    lines.append(
        f"regularization gap: |x*-x*_eta|^2 = {reg.measured:.3e} <= bound {reg.bound:.3e} "
        f"(satisfied={reg.satisfied}); phi-term |x*_v-x*_eta|^2 = "
        f"{reg.ingredients['gap_phi_sq']:.3e} <= {reg.ingredients['term2']:.3e} "
        f"(satisfied={reg.ingredients['sharp_satisfied']})"
    )

    # Online tracking bound on a short window.
    sto_op = stochastic_operator(sto, solver_steps(sto, phi=reg_phi, nu=reg_nu))
    sto_sampler = make_domain_sampler(sto, mode="stochastic")
    sto_consts = estimate_constants(sto_op, sto_sampler, n_pairs=max(n_pairs, 100), seed=seed + 1)
    eps_track = 0.9 * max_step_size(sto_consts)
    track = tracking_study(
        cfg, start=k0, n_steps=tracking_steps, eps=eps_track,
        phi=reg_phi, nu=reg_nu, constants=sto_consts, ref_tol=max(tol, 1e-9),
    )
    values.update(
        tracking_measured=track.measured, tracking_bound=track.bound,
        tracking_satisfied=track.satisfied,
        tracking_alpha=track.ingredients["alpha"],
        tracking_sigma_e=track.ingredients["sigma_e"],
        tracking_bound_printed=track.ingredients["bound_printed"],
    )
    lines.append(
        f"tracking: tail error {track.measured:.3e} <= sigma_e/(1-alpha) = {track.bound:.3e} "
        f"(satisfied={track.satisfied}); alternative printed form sigma_e/alpha = "
        f"{track.ingredients['bound_printed']:.3e}"
    )

    values["all_satisfied"] = all(
        values[k] for k in values if str(k).endswith("_satisfied")
    )
    return CertificationReport(values=values, lines=lines)


def tracking_study(
    cfg: SimulationConfig,
    start: int,
    n_steps: int,
    eps: float,
    phi: float,
    nu: float,
    constants,
    ref_tol: float = 1e-9,
):
    """Run the online iteration over a scenario window against per-step optima."""
    steps = StepSizes.uniform(eps, phi=phi, nu=nu)
    problems = [
        frozen_problem_at(cfg, start + k, mode="stochastic", constraint_source="plant")
        for k in range(n_steps)
    ]
    state = AlgorithmState.zeros(problems[0].n_nodes)
    trajectory = []
    for prob in problems:
        state = step_once(prob, state, steps)
        trajectory.append(state)
    references = []
    ref_steps = solver_steps(problems[0], phi=phi, nu=nu)
    warm = None
    for prob in problems:
        sol = solve_static(prob, ref_steps, tol=ref_tol, state0=warm)
        if not sol.converged:
            raise RuntimeError("reference solve did not converge in the tracking study")
        references.append(sol.state)
        warm = sol.state
    return tracking_report(trajectory, references, constants, eps)
