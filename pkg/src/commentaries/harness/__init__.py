"""Experiment harness: configuration, artifacts, runs, analyses and the CLI."""

from .analysis import UnsupportedFamilyError, report_analysis
from .artifact import (
    ArtifactError,
    ArtifactIncompatibleError,
    ArtifactVersionError,
    CommentaryArtifact,
    load_artifact,
    save_artifact,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import DivergenceError, run_eval, run_meta

__all__ = [
    "ArtifactError",
    "ArtifactIncompatibleError",
    "ArtifactVersionError",
    "CommentaryArtifact",
    "ConfigError",
    "DivergenceError",
    "ExperimentConfig",
    "UnsupportedFamilyError",
    "load_artifact",
    "load_config",
    "parse_config",
    "report_analysis",
    "run_eval",
    "run_meta",
    "save_artifact",
]
