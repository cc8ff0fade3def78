"""Experiment harness: config, sweeps, reports and the command line."""
from .config import ConfigError, ExperimentConfig, defaults, dump_config, load_config, parse_config
from .experiment import SplitStore, run_cell, sweep_budgets
from .report import ReportError, write_report
