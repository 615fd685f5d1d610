"""Twin-in-the-loop joint state and parameter estimation for road vehicles."""

from .benchmark import BenchGains, BenchModel, PacejkaCoeffs, run_benchmark
from .config import ConfigError, RunConfig, load_config
from .experiments import Condition, HeadToHeadSetup, Vehicle, head_to_head, run_condition, sweep
from .observer import EstimationDivergedError, GainSet, ObserverSettings, StageSchedule, run_estimation
from .rigidbody import LoadConfig, PointMass, VehicleParams, combined_inertia, perturbed_params
from .scenario import NoiseSettings, Scenario, TruthRun, simulate_truth
from .tuner import AllDivergedError, BOConfig, bo_minimize
from .twin import DigitalTwin, TwinConfig

__version__ = "0.1.0"

__all__ = [
    "AllDivergedError", "BOConfig", "BenchGains", "BenchModel", "Condition", "ConfigError",
    "DigitalTwin", "EstimationDivergedError", "GainSet", "HeadToHeadSetup", "LoadConfig",
    "NoiseSettings", "ObserverSettings", "PacejkaCoeffs", "PointMass", "RunConfig", "Scenario",
    "StageSchedule", "TruthRun", "TwinConfig", "Vehicle", "VehicleParams", "bo_minimize",
    "combined_inertia", "head_to_head", "load_config", "perturbed_params", "run_benchmark",
    "run_condition", "run_estimation", "simulate_truth", "sweep",
]
