"""Three-level boost converter: switched circuit model, linear small-signal
models, identification, PI / Takagi-Sugeno PI control and scenario runs."""

from .circuit import (
    ConverterParams,
    ConverterState,
    SimulationDiverged,
    SteadyStateNotReached,
    operating_characteristic,
    simulate,
    simulate_averaged,
    steady_state_output,
)
from .control import FuzzyPartition, PiGains, PiState, TsfConfig, blended_gains, pi_step, table_iv, tsf_pi_step
from .lti import TransferFunction, table_iii_registry
from .scenario import Scenario, builtin_scenarios, run, scenario_metrics, step_metrics
from .series import TimeSeries
from .sysid import fit_metric, fit_tf, generate_experiment, structure_scan

__all__ = [
    "ConverterParams", "ConverterState", "SimulationDiverged", "SteadyStateNotReached",
    "operating_characteristic", "simulate", "simulate_averaged", "steady_state_output",
    "FuzzyPartition", "PiGains", "PiState", "TsfConfig", "blended_gains", "pi_step",
    "table_iv", "tsf_pi_step", "TransferFunction", "table_iii_registry", "Scenario",
    "builtin_scenarios", "run", "scenario_metrics", "step_metrics", "TimeSeries",
    "fit_metric", "fit_tf", "generate_experiment", "structure_scan",
]
