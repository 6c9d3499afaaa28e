"""Simulator for score-aided federated learning over wireless links with streaming client data."""

from osafl.core_ml import ModelSpec
from osafl.exp_harness import ExperimentConfig, load_config, load_preset, run
from osafl.fl_protocols import PROTOCOLS, ScoreConfig
from osafl.resource_opt import OptimConfig, ResourcePlan, optimize

__all__ = ["ModelSpec", "ExperimentConfig", "load_config", "load_preset", "run", "PROTOCOLS",
           "ScoreConfig", "OptimConfig", "ResourcePlan", "optimize"]
__version__ = "0.1.0"
