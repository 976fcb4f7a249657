"""Configuration, verification checks, statistics and reports."""

from .checks import CHECKS
from .config import PRESETS, ExperimentConfig, default_config, load_config
from .report import ReportRecord, read_results, write_results, write_summary
from .rng import map_replicates, replicate_rng
from .runner import run_derive, run_report, run_simulate, run_solve, run_verify

__all__ = [
    "CHECKS",
    "PRESETS",
    "ExperimentConfig",
    "ReportRecord",
    "default_config",
    "load_config",
    "map_replicates",
    "read_results",
    "replicate_rng",
    "run_derive",
    "run_report",
    "run_simulate",
    "run_solve",
    "run_verify",
    "write_results",
    "write_summary",
]
