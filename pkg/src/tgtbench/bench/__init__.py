"""Experiment harness: specs, runners and the command line."""
from .config import ConfigError, ExperimentSpec, default_spec, load_config, resolve_spec
from .experiments import RUNNERS, MissingCheckpointError, Run, forward_timing, start, tgt_gradcheck

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "default_spec",
    "load_config",
    "resolve_spec",
    "RUNNERS",
    "MissingCheckpointError",
    "Run",
    "forward_timing",
    "start",
    "tgt_gradcheck",
]
