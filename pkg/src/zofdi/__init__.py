"""Model-free false-data-injection attacks via residual-feedback zeroth-order optimization."""

from .dynamics import (NoiseSource, PlantModel, Scenario, get_scenario, observe, spectral_radius,
                       step_attacked, steady_state_output)
from .errors import (AssumptionViolation, ConfigurationError, NumericOverflowError,
                     OracleUnavailableError, SteadyStateUndefinedError)
from .objective import AdversaryObjective, Reference, evaluate
from .zofo import AttackConfig, TrajectoryRecord, project_ball, run_attack, run_batch

__version__ = "0.1.0"

__all__ = [
    "AdversaryObjective", "AssumptionViolation", "AttackConfig", "ConfigurationError", "NoiseSource",
    "NumericOverflowError", "OracleUnavailableError", "PlantModel", "Reference", "Scenario",
    "SteadyStateUndefinedError", "TrajectoryRecord", "evaluate", "get_scenario", "observe",
    "project_ball", "run_attack", "run_batch", "spectral_radius", "steady_state_output", "step_attacked",
]
