"""Experiment config, cached pipeline stages and the command-line entry point."""

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .main import build_parser, main
from .pipeline import STAGES, Pipeline, PipelineError, StageFailed, run_pipeline
from .repro import ReproReport, run_repro

__all__ = [
    "ConfigError", "ExperimentConfig", "Pipeline", "PipelineError", "ReproReport", "STAGES",
    "StageFailed", "build_parser", "dump_config", "load_config", "main", "run_pipeline",
    "run_repro",
]
