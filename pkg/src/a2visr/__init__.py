"""Ground-aerial relative localization: active vision, single-range,
inertial and optical-flow fusion with an adaptive, dimension-reduced
sliding-window estimator."""

from .confidence import ConfidenceParams, WeightSet
from .dynamics import DynamicsParams, RelativeState
from .estimator import EstimatorConfig, SlidingWindowEstimator, WindowConfig, solve_full, solve_reduced
from .runlog import MetricsReport, RunLog, compute_metrics
from .scenario import ScenarioConfig, preset, replay, run_scenario

__version__ = "0.1.0"

__all__ = [
    "ConfidenceParams", "WeightSet", "DynamicsParams", "RelativeState", "EstimatorConfig",
    "SlidingWindowEstimator", "WindowConfig", "solve_full", "solve_reduced", "MetricsReport",
    "RunLog", "compute_metrics", "ScenarioConfig", "preset", "replay", "run_scenario",
]
