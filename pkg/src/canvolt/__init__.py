"""Simulated CAN-bus voltage fingerprinting and attacker identification."""

from .bus import BusConfig, EcuConfig, EcuElectricalParams, MessageSpec, TransientModel, run_scenario
from .harness import ExperimentConfig, run_experiment
from .pipeline import PipelineParams

__all__ = ["BusConfig", "EcuConfig", "EcuElectricalParams", "MessageSpec", "TransientModel",
           "run_scenario", "ExperimentConfig", "run_experiment", "PipelineParams"]
__version__ = "0.1.0"
