"""Quantum trajectories of a collective spin under continuous QND measurement and feedback."""

__version__ = "0.1.0"

from .control import ControllerSpec, control_law_1, control_law_2, cost_u, expected_cost_drift, feedback_field
from .ensemble import EnsembleStats, run_ensemble
from .hilbert import SimParams, coherent_state, dicke_state, spin_operators
from .sde_engine import NoiseStream, StepSizeError, TrajectoryRecord, simulate_batch, simulate_trajectory

__all__ = [
    "ControllerSpec", "EnsembleStats", "NoiseStream", "SimParams", "StepSizeError", "TrajectoryRecord",
    "coherent_state", "control_law_1", "control_law_2", "cost_u", "dicke_state", "expected_cost_drift",
    "feedback_field", "run_ensemble", "simulate_batch", "simulate_trajectory", "spin_operators",
]
