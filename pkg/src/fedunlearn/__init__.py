"""Federated unlearning simulator: numpy networks, a discrete-event
federation, projected gradient ascent with server-side invariance
calibration, and the evaluation harness around it."""

from .config import ExperimentConfig, parse_config, parse_config_text, to_ini
from .data_pipeline import AugmentSpec, DatasetShard, TriggerSpec
from .errors import (ConfigError, EvaluationError, FedUnlearnError, NumericalError, PartitionError,
                     ScenarioError)
from .federation_sim import FederationConfig, Timeline
from .unlearning_core import UnlearnConfig, afu_ic, pga_only, retrain_oracle

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec", "ConfigError", "DatasetShard", "EvaluationError", "ExperimentConfig", "FedUnlearnError",
    "FederationConfig", "NumericalError", "PartitionError", "ScenarioError", "Timeline", "TriggerSpec",
    "UnlearnConfig", "afu_ic", "parse_config", "parse_config_text", "pga_only", "retrain_oracle", "to_ini",
]
