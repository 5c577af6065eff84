"""Simulated-clock harness for parallel multi-fidelity hyperparameter optimization.

Benchmarks report how long an evaluation *would* take; the simulator charges
that runtime to a per-worker clock and releases results in simulated-time
order, so experiments that would take days run in seconds.
"""
from mfsim.core import (
    ConfigPoint,
    DomainError,
    ExperimentSettings,
    IntermediateState,
    QueryArgs,
    QueryResult,
    SearchSpace,
    SettingsError,
    SimClock,
    SimulatorError,
    canonical_key,
    validate_settings,
)
from mfsim.simulator import ObservationRecord, simulate_ask_and_tell, simulate_naive
from mfsim.store import SimulatedObjective, init_store

__all__ = [
    "ConfigPoint",
    "DomainError",
    "ExperimentSettings",
    "IntermediateState",
    "ObservationRecord",
    "QueryArgs",
    "QueryResult",
    "SearchSpace",
    "SettingsError",
    "SimClock",
    "SimulatedObjective",
    "SimulatorError",
    "canonical_key",
    "init_store",
    "simulate_ask_and_tell",
    "simulate_naive",
    "validate_settings",
]

__version__ = "0.1.0"
