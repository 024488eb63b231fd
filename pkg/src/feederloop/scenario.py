"""Exogenous time series: load profiles and available PV power at 1 s resolution.

The synthesizer produces a diurnal load shape with smoothed multiplicative
noise and a clear-sky half-sine PV envelope scaled by a mean-reverting cloud
multiplier in [0, 1].  All randomness comes from numpy's PCG64 generator, so
a seed reproduces series bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .devices import DerCapability
from .network import FeederModel


class TimeSeriesError(ValueError):
    """Malformed or inconsistent time-series file."""


@dataclass(frozen=True)
class TimeSeries:
    """Per-second exogenous inputs: loads (negative injections) and PV availability."""

    t: np.ndarray            # (T,) seconds, uniform 1 s spacing
    p_load: np.ndarray       # (T, N)
    q_load: np.ndarray       # (T, N)
    p_av: np.ndarray         # (T, F), aligned with pv_nodes
    pv_nodes: tuple[int, ...]

    def __post_init__(self):
        T = len(self.t)
        if self.p_load.shape[0] != T or self.q_load.shape[0] != T or self.p_av.shape[0] != T:
            raise TimeSeriesError("time axis mismatch between columns")
        if self.p_load.shape != self.q_load.shape:
            raise TimeSeriesError("p_load and q_load shapes differ")
        if self.p_av.shape[1] != len(self.pv_nodes):
            raise TimeSeriesError("p_av width does not match pv_nodes")
        if T > 1 and not np.all(np.diff(self.t) == 1):
            raise TimeSeriesError("timestamps must be uniform at 1 s")
        if np.any(self.p_av < 0):
            raise TimeSeriesError("available PV power must be nonnegative")

    @property
    def n_steps(self) -> int:
        return len(self.t)

    @property
    def n_nodes(self) -> int:
        return self.p_load.shape[1]


@dataclass(frozen=True)
class SynthParams:
    """Shape knobs for the synthetic profiles.

    Times are clock seconds; the generated window starts at ``t_start_s``.
    ``pv_peak_fraction`` scales each device's rating into its clear-sky peak.
    """

    t_start_s: int = 36_000          # 10:00
    load_p_base: float = 0.015       # per-node mean load magnitude, p.u.
    load_q_ratio: float = 0.5
    load_noise_std: float = 0.05
    load_noise_tau_s: float = 300.0
    day_start_s: int = 21_600        # 06:00
    day_length_s: int = 50_400       # 14 h of daylight
    pv_peak_fraction: float = 0.95
    cloud_mean: float = 0.9
    cloud_std: float = 0.02
    cloud_tau_s: float = 120.0


def synth_profiles(
    feeder: FeederModel,
    fleet,
    duration_s: int,
    seed: int,
    params: SynthParams = SynthParams(),
) -> TimeSeries:
    """Generate deterministic-in-seed synthetic profiles for a feeder and fleet."""
    if duration_s < 1:
        raise ValueError("duration must be at least 1 s")
    rng = np.random.default_rng(seed)
    n = feeder.n_nodes
    t = np.arange(duration_s)
    clock = params.t_start_s + t

    # Per-node load weights are fixed by the seed, not the duration.
    weights = 0.5 + rng.uniform(0.0, 1.0, n)
    shape = 0.7 + 0.3 * np.sin(np.pi * np.clip((clock - params.day_start_s) / params.day_length_s, 0.0, 1.0))
    noise = _smoothed_noise(rng, duration_s, n, params.load_noise_std, params.load_noise_tau_s)
    p_load = -params.load_p_base * weights[None, :] * shape[:, None] * (1.0 + noise)
    p_load = np.minimum(p_load, -1e-6)  # loads stay strictly negative injections
    q_load = params.load_q_ratio * p_load

    pv_nodes = tuple(c.node for c in fleet)
    ratings = np.array([c.s_rating for c in fleet])
    elev = np.sin(np.pi * (clock - params.day_start_s) / params.day_length_s)
    clear_sky = params.pv_peak_fraction * np.clip(elev, 0.0, None)
    cloud = _cloud_multiplier(rng, duration_s, params.cloud_mean, params.cloud_std, params.cloud_tau_s)
    p_av = clear_sky[:, None] * cloud[:, None] * ratings[None, :]
    return TimeSeries(t=t, p_load=p_load, q_load=q_load, p_av=p_av, pv_nodes=pv_nodes)


def _smoothed_noise(rng, duration, n, std, tau_s):
    if std == 0.0:
        return np.zeros((duration, n))
    theta = 1.0 / max(tau_s, 1.0)
    drive = rng.standard_normal((duration, n)) * std * np.sqrt(2.0 * theta)
    out = np.empty((duration, n))
    state = np.zeros(n)
    for k in range(duration):
        state = state + theta * (0.0 - state) + drive[k]
        out[k] = state
    return np.clip(out, -0.9, 0.9)


def _cloud_multiplier(rng, duration, mean, std, tau_s):
    theta = 1.0 / max(tau_s, 1.0)
    drive = rng.standard_normal(duration) * std * np.sqrt(2.0 * theta) if std > 0 else np.zeros(duration)
    out = np.empty(duration)
    state = mean
    for k in range(duration):
        state = min(1.0, max(0.0, state + theta * (mean - state) + drive[k]))
        out[k] = state
    return out


def timeseries_header(n_nodes: int, pv_nodes) -> list[str]:
    cols = ["t_s"]
    cols += [f"p_load_{i}" for i in range(1, n_nodes + 1)]
    cols += [f"q_load_{i}" for i in range(1, n_nodes + 1)]
    cols += [f"p_av_{node}" for node in pv_nodes]
    return cols


def write_timeseries(path, ts: TimeSeries) -> None:
    path = Path(path)
    cols = timeseries_header(ts.n_nodes, ts.pv_nodes)
    data = np.column_stack([ts.t, ts.p_load, ts.q_load, ts.p_av])
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def load_timeseries(path) -> TimeSeries:
    """Read the time-series CSV; validates column layout and uniform timestamps."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header:
            raise TimeSeriesError(f"{path}: empty file")
        cols = [c.strip() for c in header.split(",")]
        if cols[0] != "t_s":
            raise TimeSeriesError(f"{path}: first column must be t_s")
        n = sum(1 for c in cols if c.startswith("p_load_"))
        nq = sum(1 for c in cols if c.startswith("q_load_"))
        if n == 0 or nq != n:
            missing = "q_load" if nq != n else "p_load"
            raise TimeSeriesError(f"{path}: missing or inconsistent {missing} columns")
        expected_prefix = timeseries_header(n, [])[: 1 + 2 * n]
        if cols[: 1 + 2 * n] != expected_prefix:
            raise TimeSeriesError(f"{path}: column order must be t_s, p_load_1.., q_load_1..")
        pv_nodes = []
        for c in cols[1 + 2 * n :]:
            if not c.startswith("p_av_"):
                raise TimeSeriesError(f"{path}: unexpected column {c}")
            pv_nodes.append(int(c.removeprefix("p_av_")))
        rows = []
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            fields = raw.strip().split(",")
            if len(fields) != len(cols):
                raise TimeSeriesError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise TimeSeriesError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise TimeSeriesError(f"{path}: no data rows")
    data = np.array(rows)
    t = data[:, 0].astype(int)
    if len(t) > 1 and not np.all(np.diff(t) == 1):
        raise TimeSeriesError(f"{path}: timestamps are not uniform at 1 s")
    return TimeSeries(
        t=t,
        p_load=data[:, 1 : 1 + n],
        q_load=data[:, 1 + n : 1 + 2 * n],
        p_av=data[:, 1 + 2 * n :],
        pv_nodes=tuple(pv_nodes),
    )
