"""Experiment orchestration: configs, replica scheduling, CSV output and manifests."""
from .config import ConfigError, DiagnosticsConfig, ExperimentConfig, load_config, parse_config
from .csvio import SchemaError, read_csv, write_csv
from .manifest import RunManifest

__all__ = ["ConfigError", "DiagnosticsConfig", "ExperimentConfig", "load_config", "parse_config", "SchemaError",
           "read_csv", "write_csv", "RunManifest"]
