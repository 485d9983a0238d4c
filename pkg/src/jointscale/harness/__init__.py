"""Experiment orchestration, reporting and the command-line interface."""

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import run
from .protocol import hr_correct, hr_predict, quantize_boundary, vote_correct
from .remote import Endpoint, RemoteError, remote_classify

__all__ = [
    "ConfigError", "Endpoint", "ExperimentConfig", "RemoteError", "hr_correct", "hr_predict", "load_config",
    "quantize_boundary", "remote_classify", "run", "vote_correct",
]
