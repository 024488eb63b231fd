"""Measurement layer: voltage sensors, injection pseudo-measurements, error samples.

Noise is multiplicative (a fraction of the true value).  Weights are the
inverse variance of each channel computed from nominal magnitudes, never the
unknown truth: 1.0 p.u. for voltage channels, the pseudo-measurement
magnitude (floored at 0.01 p.u.) for injection channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

EXACT_CHANNEL_WEIGHT = 1e8
PSEUDO_NOMINAL_FLOOR = 0.01


@dataclass(frozen=True)
class SensorConfig:
    """Voltage sensor placement and channel noise levels (fractions of truth)."""

    voltage_nodes: tuple[int, ...] = (6, 7, 23)
    sigma_v: float = 0.01
    sigma_p: float = 0.5
    sigma_q: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_v, self.sigma_p, self.sigma_q) < 0:
            raise ValueError("noise levels must be nonnegative")
        object.__setattr__(self, "voltage_nodes", tuple(sorted(set(self.voltage_nodes))))

    @classmethod
    def noise_free(cls, voltage_nodes=()) -> "SensorConfig":
        return cls(voltage_nodes=tuple(voltage_nodes), sigma_v=0.0, sigma_p=0.0, sigma_q=0.0)


@dataclass
class MeasurementSnapshot:
    """One measurement set: sensed voltages plus full injection pseudo-measurements.

    ``w_*`` hold the diagonal WLS weights per channel; ``w_v`` aligns with
    ``v_nodes`` (the sorted sensor nodes of ``v_hat``).
    """

    v_hat: dict[int, float]
    p_hat: np.ndarray
    q_hat: np.ndarray
    w_p: np.ndarray
    w_q: np.ndarray
    w_v: np.ndarray

    @property
    def v_nodes(self) -> tuple[int, ...]:
        return tuple(sorted(self.v_hat))

    @property
    def n_nodes(self) -> int:
        return len(self.p_hat)


def _channel_weights(sigma: float, nominal: np.ndarray) -> np.ndarray:
    if sigma == 0.0:
        return np.full(len(nominal), EXACT_CHANNEL_WEIGHT)
    return 1.0 / (sigma * nominal) ** 2


def sample_measurements(true_v, true_inj, cfg: SensorConfig, rng) -> MeasurementSnapshot:
    """Draw one noisy snapshot of the plant.

    Multiplicative Gaussian noise per channel; zero-sigma channels are exact.
    Draw order is fixed (sensed voltages, then p, then q) so a given rng state
    always yields bit-identical snapshots.  ``rng=None`` is accepted only for
    fully noise-free configs.
    """
    true_v = np.asarray(true_v, dtype=float)
    n = len(true_v)
    if len(true_inj.p) != n:
        raise ValueError("voltage and injection lengths differ")
    nodes = cfg.voltage_nodes
    if nodes and (min(nodes) < 1 or max(nodes) > n):
        raise ValueError(f"sensor nodes {nodes} outside 1..{n}")
    if rng is None:
        if cfg.sigma_v > 0 or cfg.sigma_p > 0 or cfg.sigma_q > 0:
            raise ValueError("rng required when any noise level is positive")
        g_v = np.zeros(len(nodes))
        g_p = np.zeros(n)
        g_q = np.zeros(n)
    else:
        g_v = rng.standard_normal(len(nodes))
        g_p = rng.standard_normal(n)
        g_q = rng.standard_normal(n)

    v_meas = {node: true_v[node - 1] * (1.0 + cfg.sigma_v * g) for node, g in zip(nodes, g_v)}
    p_hat = true_inj.p * (1.0 + cfg.sigma_p * g_p)
    q_hat = true_inj.q * (1.0 + cfg.sigma_q * g_q)
    return MeasurementSnapshot(
        v_hat=v_meas,
        p_hat=p_hat,
        q_hat=q_hat,
        w_p=_channel_weights(cfg.sigma_p, np.maximum(np.abs(p_hat), PSEUDO_NOMINAL_FLOOR)),
        w_q=_channel_weights(cfg.sigma_q, np.maximum(np.abs(q_hat), PSEUDO_NOMINAL_FLOOR)),
        w_v=_channel_weights(cfg.sigma_v, np.ones(len(nodes))),
    )


@dataclass(frozen=True)
class ScenarioSet:
    """Voltage error samples backing the risk constraints."""

    samples: np.ndarray  # (n_samples, n_nodes)
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.atleast_2d(np.asarray(self.samples, dtype=float)))
        if self.samples.shape[0] < 1:
            raise ValueError("at least one error sample required")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("error samples must be finite")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def with_beta(self, beta: float) -> "ScenarioSet":
        return ScenarioSet(samples=self.samples, beta=beta)


def draw_error_samples(sigma_xi: float, n_samples: int, n_nodes: int, rng, beta: float = 0.1) -> ScenarioSet:
    """i.i.d. zero-mean Gaussian voltage error samples, std sigma_xi per node."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if sigma_xi < 0:
        raise ValueError("sigma_xi must be nonnegative")
    samples = sigma_xi * rng.standard_normal((n_samples, n_nodes))
    return ScenarioSet(samples=samples, beta=beta)


def residual_error_samples(history, beta: float = 0.1) -> ScenarioSet:
    """Empirical samples from (measured, estimated) voltage pairs.

    Data-driven alternative to Gaussian draws: each residual vector
    measured - estimated becomes one sample.
    """
    residuals = [np.asarray(meas, dtype=float) - np.asarray(est, dtype=float) for meas, est in history]
    if not residuals:
        raise ValueError("history is empty")
    return ScenarioSet(samples=np.vstack(residuals), beta=beta)
