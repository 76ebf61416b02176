"""Deterministic desk-scale simulator of federated prompt learning with
personalized low-rank adapters and a prompt-wise contrastive loss."""

from .config import ExperimentConfig, get_preset, parse_config
from .errors import (ConfigError, FedPGPError, InvalidParameterError, NoParticipantsError,
                     NumericalFailureError, ShapeError, UndefinedMetricError, UnknownClassError)
from .federation import aggregate, run_experiment, run_round, setup_experiment

__all__ = [
    "ExperimentConfig", "get_preset", "parse_config", "aggregate", "run_experiment", "run_round",
    "setup_experiment", "ConfigError", "FedPGPError", "InvalidParameterError", "NoParticipantsError",
    "NumericalFailureError", "ShapeError", "UndefinedMetricError", "UnknownClassError",
]

__version__ = "0.1.0"
