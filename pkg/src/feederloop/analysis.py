"""Numerical certification: operator constants, step-size bounds, fixed-point
residuals, the regularization-error bound, tracking bounds, and violation stats.

The saddle dynamics are analysed through their gradient operator evaluated
with consistent voltage feedback (constraints read the model voltage at the
current setpoints), the form under which the operator is provably strongly
monotone.  Constants are both sampled from random iterate pairs and, for the
deterministic case, computed exactly from the affine operator matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .control import (
    AlgorithmState,
    FrozenProblem,
    StepSizes,
    _project_controllable,
    constraint_matrix,
    cvar_active_fractions,
    cvar_constraint,
    solve_static,
    step_once,
    voltage_constraint,
)
from .estimation import se_gradient, se_hessian
from .network import InjectionVector, predict_voltage
from .sensing import ScenarioSet


@dataclass(frozen=True)
class OperatorConstants:
    """Strong-monotonicity and Lipschitz estimates of a gradient operator."""

    m_hat: float
    l_hat: float
    n_pairs: int
    min_ratio_witness: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.m_hat > self.l_hat * (1 + 1e-12):
            raise ValueError("monotonicity constant cannot exceed the Lipschitz constant")


@dataclass(frozen=True)
class BoundReport:
    measured: float
    bound: float
    satisfied: bool
    ingredients: dict = field(default_factory=dict)


def estimate_constants(step_fn, domain_sampler, n_pairs: int = 1000, seed: int = 0) -> OperatorConstants:
    """Sample operator pairs: m_hat is the worst monotonicity ratio
    <F(e) - F(e'), e - e'> / ||e - e'||^2, l_hat the worst slope ||F(e) - F(e')|| / ||e - e'||."""
    if n_pairs < 100:
        raise ValueError("need at least 100 pairs for a meaningful estimate")
    rng = np.random.default_rng(seed)
    m_hat, l_hat = np.inf, 0.0
    witness = None
    accepted = 0
    for _ in range(n_pairs):
        e = domain_sampler(rng)
        e2 = domain_sampler(rng)
        diff = e - e2
        dist_sq = float(diff @ diff)
        if dist_sq < 1e-24:
            continue
        accepted += 1
        fdiff = step_fn(e) - step_fn(e2)
        ratio = float(fdiff @ diff) / dist_sq
        slope = float(np.linalg.norm(fdiff)) / np.sqrt(dist_sq)
        if ratio < m_hat:
            m_hat, witness = ratio, (e, e2)
        l_hat = max(l_hat, slope)
    if accepted == 0:
        raise ValueError("degenerate sampler: every pair had zero distance")
    return OperatorConstants(m_hat=m_hat, l_hat=l_hat, n_pairs=accepted, min_ratio_witness=witness)


def exact_affine_constants(matrix) -> tuple[float, float]:
    """Exact constants of an affine operator F(e) = A e + b: the smallest
    eigenvalue of the symmetric part and the largest singular value."""
    A = np.asarray(matrix, dtype=float)
    m = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    l = float(np.linalg.svd(A, compute_uv=False)[0])
    return m, l


def max_step_size(c: OperatorConstants) -> float:
    """Largest provably convergent step, 2 m_hat / l_hat^2."""
    if c.l_hat <= 0:
        raise ValueError("Lipschitz constant must be positive")
    return 2.0 * max(c.m_hat, 0.0) / c.l_hat**2


@dataclass
class AffineOperator:
    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, e) -> np.ndarray:
        return self.matrix @ np.asarray(e, dtype=float) + self.offset


def _frozen_snapshot(problem: FrozenProblem):
    u0 = np.zeros(2 * problem.n_nodes)
    return problem.snapshot_at(u0)


def deterministic_operator(problem: FrozenProblem, steps: StepSizes) -> AffineOperator:
    """Affine gradient operator of the deterministic saddle dynamics over
    (u, z, dual), with the constraint read at the model voltage of the current
    setpoints (consistent feedback) and the estimator decoupled at frozen
    measurements."""
    model = problem.model
    n = model.n_nodes
    H = constraint_matrix(model)
    D_u = np.diag(problem.cost.hessian_diag())
    m = _frozen_snapshot(problem)
    A_se = se_hessian(m, model)
    two_n = 2 * n
    A = np.zeros((3 * two_n, 3 * two_n))
    A[:two_n, :two_n] = D_u
    A[:two_n, 2 * two_n :] = H.T
    A[two_n : 2 * two_n, two_n : 2 * two_n] = A_se
    A[2 * two_n :, :two_n] = -H
    A[2 * two_n :, 2 * two_n :] = steps.phi * np.eye(two_n)

    load_stack = np.concatenate([problem.load.p, problem.load.q])
    r0 = voltage_constraint(model.v0, problem.limits) + H @ load_stack
    grad_at_zero = problem.cost.gradient(np.zeros(two_n))
    b = np.concatenate([grad_at_zero, se_gradient(np.zeros(two_n), m, model), -r0])
    return AffineOperator(matrix=A, offset=b)


def stochastic_operator(problem: FrozenProblem, steps: StepSizes):
    """Piecewise-affine gradient operator of the regularized stochastic saddle
    dynamics over (u, z, tau, dual), constraints read at the model voltage of
    the current setpoints."""
    if problem.scen is None:
        raise ValueError("stochastic operator needs a scenario set")
    model = problem.model
    n = model.n_nodes
    two_n = 2 * n
    H = constraint_matrix(model)
    m = _frozen_snapshot(problem)
    A_se = se_hessian(m, model)
    b_se = se_gradient(np.zeros(two_n), m, model)
    scen, limits, cost, load = problem.scen, problem.limits, problem.cost, problem.load

    def op(e) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        u, z, tau, lam = np.split(e, [two_n, 2 * two_n, 3 * two_n])
        v = predict_voltage(model, InjectionVector(load.p + u[:n], load.q + u[n:]))
        f_up, f_lo = cvar_active_fractions(v, tau, scen, limits)
        fractions = np.concatenate([f_up, f_lo])
        g = cvar_constraint(v, tau, scen, limits)
        row_u = cost.gradient(u) + H.T @ (fractions * lam)
        row_z = A_se @ z + b_se
        row_tau = (fractions - scen.beta) * lam + steps.nu * tau
        row_lam = -(g - steps.phi * lam)
        return np.concatenate([row_u, row_z, row_tau, row_lam])

    return op


def make_domain_sampler(
    problem: FrozenProblem,
    mode: str = "deterministic",
    u_scale: float | None = None,
    z_scale: float | None = None,
    dual_hi: float = 2.0,
    tau_hi: float = 0.1,
):
    """Uniform sampler over a box around the feasible region of the iterate."""
    n = problem.n_nodes
    two_n = 2 * n
    if u_scale is None:
        u_scale = max((c.s_rating for c in problem.fleet), default=0.2)
    if z_scale is None:
        z_scale = u_scale + float(np.max(np.abs(np.concatenate([problem.load.p, problem.load.q])), initial=0.0))

    def sample(rng) -> np.ndarray:
        u = rng.uniform(-u_scale, u_scale, two_n)
        z = rng.uniform(-z_scale, z_scale, two_n)
        dual = rng.uniform(0.0, dual_hi, two_n)
        if mode == "deterministic":
            return np.concatenate([u, z, dual])
        tau = rng.uniform(0.0, tau_hi, two_n)
        return np.concatenate([u, z, tau, dual])

    return sample


def kkt_residual(state: AlgorithmState, problem: FrozenProblem, steps: StepSizes) -> float:
    """Fixed-point residual ||s - one_step(s)||_inf of the projected dynamics."""
    nxt = step_once(problem, state, steps)
    return float(np.max(np.abs(state.stack() - nxt.stack())))


def _primal_stack(state: AlgorithmState) -> np.ndarray:
    return np.concatenate([state.u, state.z, state.tau])


def regularization_gap(
    problem: FrozenProblem,
    phi: float,
    nu: float,
    steps: StepSizes,
    tol: float = 1e-11,
    n_grad_samples: int = 10_000,
    inflation: float = 1.1,
    seed: int = 0,
    nu_probe: float = 1e-8,
    max_iters: int = 2_000_000,
) -> BoundReport:
    """Measure the primal shift caused by the Tikhonov terms against its bound.

    Solves the frozen stochastic problem three times: unregularized (nu-probe
    stands in for the nu-free optimum and selects its least-norm auxiliaries),
    tau-regularized only (phi = 0), and fully regularized.  The bound is
    (2 (G_f + G_g ||lam_v||_1) / c)^2 + (phi / 2c) (||lam_v||^2 - ||lam_eta||^2)
    with G_f, G_g sampled suprema (inflated) and c the exact smallest curvature
    of the regularized objective.
    """
    if problem.mode != "stochastic":
        raise ValueError("regularization gap is defined for the stochastic problem")
    if problem.measurements is None:
        problem = replace(problem, measurements=_frozen_snapshot(problem))

    def solved(phi_s: float, nu_s: float) -> AlgorithmState:
        s = replace(steps, phi=phi_s, nu=nu_s)
        sol = solve_static(problem, s, tol=tol, max_iters=max_iters)
        if not sol.converged:
            raise RuntimeError(
                f"static solve (phi={phi_s}, nu={nu_s}) did not reach tol {tol}; "
                f"displacement {sol.displacement:.3e}"
            )
        return sol.state

    x_star = solved(0.0, nu_probe)
    x_v = solved(0.0, nu)
    x_eta = solved(phi, nu)

    model = problem.model
    n = model.n_nodes
    two_n = 2 * n
    A_se = se_hessian(problem.measurements, model)
    c = min(float(np.min(problem.cost.hessian_diag())), float(np.linalg.eigvalsh(A_se)[0]), nu)

    rng = np.random.default_rng(seed)
    sampler = make_domain_sampler(problem, mode="stochastic", tau_hi=0.05)
    H = constraint_matrix(model)
    row_norms_H = np.linalg.norm(H, axis=1)
    g_f, g_g = 0.0, 0.0
    for _ in range(n_grad_samples):
        e = sampler(rng)
        u, z, tau, _ = np.split(e, [two_n, 2 * two_n, 3 * two_n])
        # Projection keeps the sampled primal point inside the feasible region.
        u = _project_controllable(u, problem.fleet, n)
        grad_f = np.concatenate(
            [problem.cost.gradient(u), se_gradient(z, problem.measurements, model), nu * tau]
        )
        g_f = max(g_f, float(np.linalg.norm(grad_f)))
        v = predict_voltage(model, InjectionVector(problem.load.p + u[:n], problem.load.q + u[n:]))
        f_up, f_lo = cvar_active_fractions(v, tau, problem.scen, problem.limits)
        fractions = np.concatenate([f_up, f_lo])
        row = np.sqrt((fractions * row_norms_H) ** 2 + (fractions - problem.scen.beta) ** 2)
        g_g = max(g_g, float(np.max(row)))
    g_f *= inflation
    g_g *= inflation

    lam_v, lam_eta = x_v.dual, x_eta.dual
    term1 = (2.0 * (g_f + g_g * float(np.sum(np.abs(lam_v)))) / c) ** 2
    term2 = (phi / (2.0 * c)) * float(lam_v @ lam_v - lam_eta @ lam_eta)
    gap_phi_sq = float(np.sum((_primal_stack(x_v) - _primal_stack(x_eta)) ** 2))
    gap_nu_sq = float(np.sum((_primal_stack(x_star) - _primal_stack(x_v)) ** 2))
    gap_total_sq = float(np.sum((_primal_stack(x_star) - _primal_stack(x_eta)) ** 2))
    bound = term1 + term2
    return BoundReport(
        measured=gap_total_sq,
        bound=bound,
        satisfied=gap_total_sq <= bound * (1 + 1e-9),
        ingredients={
            "gap_total_sq": gap_total_sq,
            "gap_nu_sq": gap_nu_sq,
            "gap_phi_sq": gap_phi_sq,
            "term1": term1,
            "term2": term2,
            "g_f": g_f,
            "g_g": g_g,
            "c": c,
            "lambda_v_norm1": float(np.sum(np.abs(lam_v))),
            "lambda_v_normsq": float(lam_v @ lam_v),
            "lambda_eta_normsq": float(lam_eta @ lam_eta),
            "sharp_satisfied": gap_phi_sq <= term2 * (1 + 1e-9) + 1e-15,
        },
    )


def tracking_report(
    trajectory,
    references,
    constants: OperatorConstants,
    eps: float,
    tail_fraction: float = 0.2,
) -> BoundReport:
    """Tail tracking error of an online trajectory against per-step optima.

    sigma_e is the worst reference drift between consecutive steps; the
    contraction factor is alpha = sqrt(1 - 2 eps M + eps^2 L^2).  The report
    carries both sigma_e / (1 - alpha) (the bound the geometric recursion
    yields, used for the pass/fail flag) and sigma_e / alpha as printed in the
    source analysis; the two are not reconciled here.
    """
    if len(trajectory) != len(references):
        raise ValueError("trajectory and reference sequences must align")
    if len(trajectory) < 2:
        raise ValueError("need at least two steps")
    traj = np.array([s.stack() for s in trajectory])
    refs = np.array([s.stack() for s in references])
    dists = np.linalg.norm(traj - refs, axis=1)
    sigma_e = float(np.max(np.linalg.norm(np.diff(refs, axis=0), axis=1)))
    alpha_sq = 1.0 - 2.0 * eps * constants.m_hat + eps**2 * constants.l_hat**2
    alpha = float(np.sqrt(max(alpha_sq, 0.0)))
    tail = dists[int(np.floor(len(dists) * (1.0 - tail_fraction))) :]
    measured = float(np.max(tail))
    bound = sigma_e / (1.0 - alpha) if alpha < 1.0 else np.inf
    bound_printed = sigma_e / alpha if alpha > 0 else np.inf
    return BoundReport(
        measured=measured,
        bound=bound,
        satisfied=measured <= bound * (1 + 1e-9),
        ingredients={
            "alpha": alpha,
            "sigma_e": sigma_e,
            "bound_printed": bound_printed,
            "eps": eps,
            "m_hat": constants.m_hat,
            "l_hat": constants.l_hat,
        },
    )


@dataclass(frozen=True)
class ViolationStats:
    per_node_fraction: np.ndarray
    fraction_total: float
    max_depth: float
    depth_quantiles: dict

    @property
    def max_node_fraction(self) -> float:
        return float(np.max(self.per_node_fraction))


def violation_stats(voltage_history, limits) -> ViolationStats:
    """Per-node violation frequencies and depth quantiles over a run."""
    v = np.atleast_2d(np.asarray(voltage_history, dtype=float))
    if v.size == 0:
        raise ValueError("voltage history is empty")
    over = np.maximum(0.0, v - limits.v_max[None, :])
    under = np.maximum(0.0, limits.v_min[None, :] - v)
    depth = np.maximum(over, under)
    violating = depth > 0
    frac = violating.mean(axis=0)
    depths = depth[violating]
    if depths.size:
        qs = {q: float(np.quantile(depths, q)) for q in (0.5, 0.9, 0.99)}
        qs[1.0] = float(depths.max())
    else:
        qs = {0.5: 0.0, 0.9: 0.0, 0.99: 0.0, 1.0: 0.0}
    return ViolationStats(
        per_node_fraction=frac,
        fraction_total=float(violating.mean()),
        max_depth=float(depth.max()),
        depth_quantiles=qs,
    )
