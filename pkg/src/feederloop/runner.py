"""Closed-loop simulation engine and configuration handling.

Each simulated second: the nonlinear plant solves the feeder at the applied
setpoints plus exogenous loads, sensors sample it, and the configured
controller advances one joint step (estimate, duals, device setpoints).
Runs are bit-reproducible from the config seeds.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import kkt_residual, violation_stats
from .control import (
    AlgorithmState,
    FrozenProblem,
    OpfCost,
    StepSizes,
    VoltageLimits,
    joint_step_deterministic,
    joint_step_measured,
    joint_step_stochastic,
    _project_controllable,
)
from .devices import DerCapability, load_fleet
from .estimation import estimated_voltage
from .network import DistflowSolver, FeederModel, InjectionVector, build_linear_model, load_feeder
from .scenario import SynthParams, TimeSeries, load_timeseries, synth_profiles
from .sensing import SensorConfig, draw_error_samples, sample_measurements

MODES = ("uncontrolled", "measured-baseline", "deterministic-joint", "stochastic-joint")


class ConfigError(ValueError):
    """Invalid or incomplete simulation configuration."""


@dataclass
class SimulationConfig:
    feeder_path: Path
    fleet_path: Path
    mode: str = "deterministic-joint"
    timeseries_path: Path | None = None       # exclusive with synth
    synth: SynthParams | None = None
    duration_s: int | None = None             # defaults to the series length
    scenario_seed: int = 1
    sensors: SensorConfig = field(default_factory=SensorConfig)
    steps: StepSizes = field(default_factory=StepSizes)
    v_max: float = 1.045
    v_min: float = 0.95
    w_p: float = 1.0
    w_q: float = 3.0
    beta: float = 0.1
    n_samples: int = 100
    sigma_xi: float = 0.01
    sample_seed: int = 2
    resample_xi: bool = False
    inner_iters: int = 1
    out_dir: Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.inner_iters < 1:
            raise ConfigError("inner_iters must be >= 1")
        for path in (self.feeder_path, self.fleet_path):
            if not Path(path).exists():
                raise ConfigError(f"missing input file: {path}")
        if self.timeseries_path is not None and self.synth is not None:
            raise ConfigError("give either a time-series path or synth parameters, not both")
        if self.timeseries_path is None and self.synth is None:
            raise ConfigError("a time-series source is required (path or synth section)")


_SECTION_KEYS = {
    "feeder": {"path"},
    "fleet": {"path"},
    "timeseries": {
        "source", "path", "duration_s", "seed", "t_start_s", "load_p_base", "load_q_ratio",
        "load_noise_std", "load_noise_tau_s", "day_start_s", "day_length_s",
        "pv_peak_fraction", "cloud_mean", "cloud_std", "cloud_tau_s",
    },
    "sensors": {"voltage_nodes", "sigma_v", "sigma_p", "sigma_q", "seed"},
    "control": {
        "mode", "eps_u", "eps_z", "eps_tau", "eps_dual", "phi", "nu",
        "v_max", "v_min", "w_p", "w_q", "beta", "n_samples", "sigma_xi",
        "sample_seed", "resample_xi", "inner_iters",
    },
    "output": {"dir"},
}


def load_config(path) -> SimulationConfig:
    """Parse the key=value config file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)} in [{section}]")
    for required in ("feeder", "fleet", "timeseries"):
        if required not in parser:
            raise ConfigError(f"{path}: missing [{required}] section")

    base = path.parent

    def respath(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base / p

    ts = parser["timeseries"]
    source = ts.get("source", "path" if "path" in ts else "synth")
    ts_path, synth, duration, scen_seed = None, None, None, 1
    if source == "path":
        if "path" not in ts:
            raise ConfigError(f"{path}: [timeseries] source=path needs a path key")
        ts_path = respath(ts["path"])
        if "duration_s" in ts:
            duration = ts.getint("duration_s")
    elif source == "synth":
        if "duration_s" not in ts:
            raise ConfigError(f"{path}: [timeseries] source=synth needs duration_s")
        duration = ts.getint("duration_s")
        scen_seed = ts.getint("seed", 1)
        defaults = SynthParams()
        synth = SynthParams(
            t_start_s=ts.getint("t_start_s", defaults.t_start_s),
            load_p_base=ts.getfloat("load_p_base", defaults.load_p_base),
            load_q_ratio=ts.getfloat("load_q_ratio", defaults.load_q_ratio),
            load_noise_std=ts.getfloat("load_noise_std", defaults.load_noise_std),
            load_noise_tau_s=ts.getfloat("load_noise_tau_s", defaults.load_noise_tau_s),
            day_start_s=ts.getint("day_start_s", defaults.day_start_s),
            day_length_s=ts.getint("day_length_s", defaults.day_length_s),
            pv_peak_fraction=ts.getfloat("pv_peak_fraction", defaults.pv_peak_fraction),
            cloud_mean=ts.getfloat("cloud_mean", defaults.cloud_mean),
            cloud_std=ts.getfloat("cloud_std", defaults.cloud_std),
            cloud_tau_s=ts.getfloat("cloud_tau_s", defaults.cloud_tau_s),
        )
    else:
        raise ConfigError(f"{path}: [timeseries] source must be path or synth")

    sensors = SensorConfig()
    if "sensors" in parser:
        sec = parser["sensors"]
        nodes = sensors.voltage_nodes
        if "voltage_nodes" in sec:
            nodes = tuple(int(tok) for tok in sec["voltage_nodes"].split(",") if tok.strip())
        sensors = SensorConfig(
            voltage_nodes=nodes,
            sigma_v=sec.getfloat("sigma_v", sensors.sigma_v),
            sigma_p=sec.getfloat("sigma_p", sensors.sigma_p),
            sigma_q=sec.getfloat("sigma_q", sensors.sigma_q),
            seed=sec.getint("seed", sensors.seed),
        )

    kwargs: dict = {}
    steps = StepSizes()
    if "control" in parser:
        sec = parser["control"]
        steps = StepSizes(
            eps_u=sec.getfloat("eps_u", steps.eps_u),
            eps_z=sec.getfloat("eps_z", steps.eps_z),
            eps_tau=sec.getfloat("eps_tau", steps.eps_tau),
            eps_dual=sec.getfloat("eps_dual", steps.eps_dual),
            phi=sec.getfloat("phi", steps.phi),
            nu=sec.getfloat("nu", steps.nu),
        )
        for key, getter in (
            ("mode", sec.get), ("v_max", sec.getfloat), ("v_min", sec.getfloat),
            ("w_p", sec.getfloat), ("w_q", sec.getfloat), ("beta", sec.getfloat),
            ("n_samples", sec.getint), ("sigma_xi", sec.getfloat),
            ("sample_seed", sec.getint), ("resample_xi", sec.getboolean),
            ("inner_iters", sec.getint),
        ):
            if key in sec:
                kwargs[key] = getter(key)

    out_dir = None
    if "output" in parser and "dir" in parser["output"]:
        out_dir = respath(parser["output"]["dir"])

    try:
        return SimulationConfig(
            feeder_path=respath(parser["feeder"]["path"]),
            fleet_path=respath(parser["fleet"]["path"]),
            timeseries_path=ts_path,
            synth=synth,
            duration_s=duration,
            scenario_seed=scen_seed,
            sensors=sensors,
            steps=steps,
            out_dir=out_dir,
            **kwargs,
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc}") from None


@dataclass
class SimulationResult:
    t: np.ndarray
    v_true: np.ndarray      # (T, N) plant voltages under the applied setpoints
    v_est: np.ndarray       # (T, N) estimator's voltages after the step at t
    u: np.ndarray           # (T, 2N) setpoints applied at t
    dual: np.ndarray        # (T, 2N)
    tau: np.ndarray         # (T, 2N)
    viol_count: np.ndarray  # (T,)
    obj: np.ndarray         # (T,)
    summary: dict


def _fleet_at(fleet, p_av_row) -> list[DerCapability]:
    return [replace(cap, p_av=float(p)) for cap, p in zip(fleet, p_av_row)]


def load_inputs(cfg: SimulationConfig):
    """Resolve config inputs: feeder, fleet, linear model, series, fleet p_av."""
    feeder = load_feeder(cfg.feeder_path)
    fleet = load_fleet(cfg.fleet_path)
    n = feeder.n_nodes
    for cap in fleet:
        if not 1 <= cap.node <= n:
            raise ConfigError(f"fleet node {cap.node} outside feeder range 1..{n}")
    model = build_linear_model(feeder)
    if cfg.timeseries_path is not None:
        series = load_timeseries(cfg.timeseries_path)
        if series.n_nodes != n:
            raise ConfigError(f"time series covers {series.n_nodes} nodes, feeder has {n}")
        missing = [c.node for c in fleet if c.node not in series.pv_nodes]
        if missing:
            raise ConfigError(f"time series lacks p_av columns for fleet nodes {missing}")
        fleet_cols = [series.pv_nodes.index(c.node) for c in fleet]
        p_av_all = series.p_av[:, fleet_cols]
    else:
        series = synth_profiles(feeder, fleet, cfg.duration_s, cfg.scenario_seed, cfg.synth)
        p_av_all = series.p_av
    return feeder, fleet, model, series, p_av_all


def run_simulation(cfg: SimulationConfig) -> SimulationResult:
    feeder, fleet, model, series, p_av_all = load_inputs(cfg)
    n = feeder.n_nodes
    solver = DistflowSolver(feeder)
    limits = VoltageLimits.uniform(n, v_max=cfg.v_max, v_min=cfg.v_min)

    T = series.n_steps if cfg.duration_s is None else min(cfg.duration_s, series.n_steps)
    noise_rng = np.random.default_rng(cfg.sensors.seed)
    xi_rng = np.random.default_rng(cfg.sample_seed)
    scen = draw_error_samples(cfg.sigma_xi, cfg.n_samples, n, xi_rng, beta=cfg.beta)

    state = AlgorithmState.zeros(n)
    if T > 0:
        u0 = np.zeros(2 * n)
        u0[[c.node - 1 for c in fleet]] = p_av_all[0]
        state = replace(state, u=_project_controllable(u0, _fleet_at(fleet, p_av_all[0]), n))

    out = {
        "v_true": np.zeros((T, n)), "v_est": np.zeros((T, n)), "u": np.zeros((T, 2 * n)),
        "dual": np.zeros((T, 2 * n)), "tau": np.zeros((T, 2 * n)),
        "viol": np.zeros(T, dtype=int), "obj": np.zeros(T), "curtail": np.zeros(T),
    }
    final_inputs = None
    for k in range(T):
        caps = _fleet_at(fleet, p_av_all[k])
        p_ref = np.zeros(n)
        p_ref[[c.node - 1 for c in caps]] = p_av_all[k]
        cost = OpfCost.curtailment(p_ref, w_p=cfg.w_p, w_q=cfg.w_q)
        load = InjectionVector(series.p_load[k], series.q_load[k])

        if cfg.mode == "uncontrolled":
            u_full = np.zeros(2 * n)
            u_full[[c.node - 1 for c in caps]] = p_av_all[k]
            state = replace(state, u=_project_controllable(u_full, caps, n))

        total = load + InjectionVector(state.u[:n], state.u[n:])
        sol = solver.solve(total)
        if not sol.converged:
            raise RuntimeError(f"plant power flow did not converge at step {k}")
        snapshot = sample_measurements(sol.v, total, cfg.sensors, noise_rng)
        if cfg.resample_xi and cfg.mode == "stochastic-joint":
            scen = draw_error_samples(cfg.sigma_xi, cfg.n_samples, n, xi_rng, beta=cfg.beta)

        out["v_true"][k] = sol.v
        out["u"][k] = state.u
        out["obj"][k] = cost.value(state.u)
        out["viol"][k] = int(np.sum((sol.v > limits.v_max) | (sol.v < limits.v_min)))
        der_idx = [c.node - 1 for c in caps]
        out["curtail"][k] = float(np.mean(np.maximum(0.0, p_av_all[k] - state.u[der_idx])))

        if cfg.mode != "uncontrolled":
            for _ in range(cfg.inner_iters):
                if cfg.mode == "deterministic-joint":
                    state = joint_step_deterministic(state, snapshot, model, caps, cost, limits, cfg.steps)
                elif cfg.mode == "measured-baseline":
                    state = joint_step_measured(state, sol.v, snapshot, model, caps, cost, limits, cfg.steps)
                else:
                    state = joint_step_stochastic(state, snapshot, scen, model, caps, cost, limits, cfg.steps)
        out["v_est"][k] = estimated_voltage(state.z, model)
        out["dual"][k] = state.dual
        out["tau"][k] = state.tau
        final_inputs = (caps, cost, load)

    summary = _summarize(cfg, out, limits, T, n)
    if cfg.mode != "uncontrolled" and final_inputs is not None:
        caps, cost, load = final_inputs
        problem = FrozenProblem(
            model=model, fleet=caps, cost=cost, limits=limits, load=load,
            mode="stochastic" if cfg.mode == "stochastic-joint" else
                 ("measured" if cfg.mode == "measured-baseline" else "deterministic"),
            scen=scen if cfg.mode == "stochastic-joint" else None,
            feeder=feeder,
        )
        summary["kkt_residual_final"] = kkt_residual(state, problem, cfg.steps)

    return SimulationResult(
        t=series.t[:T], v_true=out["v_true"], v_est=out["v_est"], u=out["u"],
        dual=out["dual"], tau=out["tau"], viol_count=out["viol"], obj=out["obj"],
        summary=summary,
    )


def _summarize(cfg, out, limits, T, n) -> dict:
    summary = {"mode": cfg.mode, "steps": T, "nodes": n}
    if T == 0:
        summary.update(max_v=float("nan"), min_v=float("nan"),
                       violation_fraction=0.0, mean_curtailment=0.0, max_violation_depth=0.0)
        return summary
    stats = violation_stats(out["v_true"], limits)
    summary["max_v"] = float(out["v_true"].max())
    summary["min_v"] = float(out["v_true"].min())
    summary["violation_fraction"] = stats.fraction_total
    summary["max_node_violation_fraction"] = stats.max_node_fraction
    summary["max_violation_depth"] = stats.max_depth
    summary["mean_curtailment"] = float(np.mean(out["curtail"]))
    return summary


def write_trajectory(path, result: SimulationResult) -> None:
    """Fixed-layout trajectory CSV; floats printed with full precision so
    identical runs are byte-identical."""
    path = Path(path)
    n = result.v_true.shape[1] if result.v_true.size else 0
    cols = (
        ["t_s"]
        + [f"v_true_{i}" for i in range(1, n + 1)]
        + [f"v_est_{i}" for i in range(1, n + 1)]
        + [f"p_{i}" for i in range(1, n + 1)]
        + [f"q_{i}" for i in range(1, n + 1)]
        + [f"lambda_{i}" for i in range(1, 2 * n + 1)]
        + [f"tau_{i}" for i in range(1, 2 * n + 1)]
        + ["viol_count", "obj"]
    )
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(result.t)):
            row = np.concatenate([
                [result.t[k]], result.v_true[k], result.v_est[k],
                result.u[k], result.dual[k], result.tau[k],
                [result.viol_count[k], result.obj[k]],
            ])
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def write_summary(path, summary: dict) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for key in sorted(summary):
            fh.write(f"{key}={summary[key]}\n")
