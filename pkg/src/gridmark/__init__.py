"""gridmark: dynamic watermarking for droop-controlled microgrids.

Builds the nonlinear inverter-network model, linearizes it around a
closed-loop equilibrium, simulates the droop loop with a private
watermark on the command streams, and runs per-unit detectors that flag
sensor-channel attacks (destabilizing filters, noise injection, replay)
from windowed residual statistics.
"""

__version__ = "0.1.0"

from .grid_model import (
    NetworkModel, DguModel, LoadModel, Equilibrium, StateSpace, DaeModel,
    load_network, build_ybus, solve_power_flow, assemble_dae,
    find_equilibrium, linearize, discretize,
)
from .droop_control import (
    DroopState, WatermarkSource, droop_step, inject_watermark, gain_matrices,
)
from .attack_channel import (
    AttackSpec, AttackSpecError, FilterState, AttackChannel, apply_attack,
    destab_filter_step,
)
from .watermark_detector import (
    ReducedModel, KalmanState, IndicatorWindow, Detector, DetectorError,
    Thresholds, AlarmDecision, WindowRecord, build_reduced_model,
    solve_riccati, kalman_step, accumulate_indicators, threshold_test,
    calibrate_thresholds, export_reduced_model,
)
from .sim_engine import (
    Scenario, DetectorConfig, TimeSeries, RunSummary, PreparedPlant,
    ScenarioError, ArtifactError, SimulationDivergedError,
    load_scenario, load_thresholds, save_thresholds, prepare_plant,
    run_scenario, monte_carlo, summarize_run, summary_dict, derive_seeds,
    write_run_artifacts,
)
