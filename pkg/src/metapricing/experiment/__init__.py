"""Experiment configuration, data replay, result files and the command line."""

from .config import PRESETS, ConfigError, ExperimentConfig, dump_config, load_config, preset
from .data import (
    DataError,
    DatasetSchema,
    fit_reference_model,
    ingest_epoch_dataset,
    run_replay,
)
from .results import emit_results

__all__ = [
    "PRESETS", "ConfigError", "ExperimentConfig", "dump_config", "load_config", "preset",
    "DataError", "DatasetSchema", "fit_reference_model", "ingest_epoch_dataset", "run_replay",
    "emit_results",
]
