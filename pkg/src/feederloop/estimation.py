"""Weighted least-squares state estimation under the linear voltage model.

The state is the stacked injection vector z = (p, q) of length 2N.  The
measurement map is linear: identity rows for the injection pseudo-channels
and [R X] rows (offset v0) for the sensed voltage channels, which makes the
normal equations an exact oracle for the gradient-descent estimator.
"""

from __future__ import annotations

import numpy as np

from .network import LinearVoltageModel
from .sensing import MeasurementSnapshot


class RankDeficientError(ValueError):
    """The stacked measurement matrix does not determine the state."""


def measurement_system(m: MeasurementSnapshot, model: LinearVoltageModel):
    """Stacked (H, W, y, offset): rows are p-pseudo, q-pseudo, then sensed voltages."""
    n = model.n_nodes
    if m.n_nodes != n:
        raise ValueError(f"snapshot covers {m.n_nodes} nodes, model {n}")
    v_nodes = m.v_nodes
    rows_v = np.hstack([model.R, model.X])[[i - 1 for i in v_nodes], :]
    H = np.vstack([np.eye(2 * n), rows_v]) if v_nodes else np.eye(2 * n)
    w = np.concatenate([m.w_p, m.w_q, m.w_v])
    y = np.concatenate([m.p_hat, m.q_hat, [m.v_hat[i] for i in v_nodes]])
    offset = np.concatenate([np.zeros(2 * n), model.v0[[i - 1 for i in v_nodes]]])
    return H, w, y, offset


def estimated_voltage(z, model: LinearVoltageModel) -> np.ndarray:
    """Voltage implied by an estimate, v = R p~ + X q~ + v0 (never stored)."""
    z = np.asarray(z, dtype=float)
    n = model.n_nodes
    return model.R @ z[:n] + model.X @ z[n:] + model.v0


def se_objective(z, m: MeasurementSnapshot, model: LinearVoltageModel) -> float:
    """Half of the weighted squared residual over all measurement channels."""
    H, w, y, offset = measurement_system(m, model)
    res = y - offset - H @ np.asarray(z, dtype=float)
    return 0.5 * float(res @ (w * res))


def se_gradient(z, m: MeasurementSnapshot, model: LinearVoltageModel) -> np.ndarray:
    H, w, y, offset = measurement_system(m, model)
    res = y - offset - H @ np.asarray(z, dtype=float)
    return -H.T @ (w * res)


def se_hessian(m: MeasurementSnapshot, model: LinearVoltageModel) -> np.ndarray:
    H, w, _, _ = measurement_system(m, model)
    return H.T @ (w[:, None] * H)


def wls_closed_form(m: MeasurementSnapshot, model: LinearVoltageModel) -> np.ndarray:
    """Normal-equations solution z* = (H^T W H)^-1 H^T W (y - offset).

    Independent oracle for the gradient estimator; requires full
    observability (H^T W H positive definite).
    """
    H, w, y, offset = measurement_system(m, model)
    A = H.T @ (w[:, None] * H)
    b = H.T @ (w * (y - offset))
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(A)
        raise RankDeficientError(
            f"measurement matrix rank {rank} < {A.shape[0]} states"
        ) from None
    z = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    return z


def se_gradient_fixed_point(
    m: MeasurementSnapshot,
    model: LinearVoltageModel,
    z0=None,
    tol: float = 1e-12,
    max_iters: int = 200_000,
) -> np.ndarray:
    """Run the estimator's gradient iteration to its fixed point.

    Steps with 2 / (lmin + lmax) of the quadratic's Hessian, the optimal
    fixed step; used to cross-check the closed form.
    """
    A = se_hessian(m, model)
    eigs = np.linalg.eigvalsh(A)
    eps = 2.0 / (eigs[0] + eigs[-1])
    z = np.concatenate([m.p_hat, m.q_hat]) if z0 is None else np.asarray(z0, dtype=float)
    for _ in range(max_iters):
        g = se_gradient(z, m, model)
        z_new = z - eps * g
        if np.max(np.abs(z_new - z)) < tol:
            return z_new
        z = z_new
    return z
