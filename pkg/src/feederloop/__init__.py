"""feederloop: closed-loop voltage regulation for radial distribution feeders.

Joint online optimal power flow and weighted least-squares state estimation,
driven by primal-dual gradient steps with optional CVaR-robust voltage
constraints, plus a certification suite for the convergence and tracking
properties of the dynamics.
"""

from .analysis import (
    BoundReport,
    OperatorConstants,
    ViolationStats,
    estimate_constants,
    exact_affine_constants,
    kkt_residual,
    max_step_size,
    regularization_gap,
    tracking_report,
    violation_stats,
)
from .control import (
    AlgorithmState,
    FrozenProblem,
    OpfCost,
    StepSizes,
    VoltageLimits,
    cvar_constraint,
    cvar_subgradients,
    joint_step_deterministic,
    joint_step_measured,
    joint_step_stochastic,
    solve_static,
    voltage_constraint,
)
from .devices import DerCapability, fleet_project, load_fleet, project_feasible
from .estimation import se_gradient, se_objective, wls_closed_form
from .network import (
    FeederModel,
    InjectionVector,
    LinearVoltageModel,
    PowerFlowSolution,
    build_linear_model,
    load_feeder,
    predict_voltage,
    solve_distflow,
)
from .runner import SimulationConfig, load_config, run_simulation
from .scenario import SynthParams, TimeSeries, load_timeseries, synth_profiles
from .sensing import (
    MeasurementSnapshot,
    ScenarioSet,
    SensorConfig,
    draw_error_samples,
    residual_error_samples,
    sample_measurements,
)

__version__ = "0.1.0"
