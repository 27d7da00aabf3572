"""Experiment harness: configuration, baselines, orchestration, reports and CLI."""
from .baselines import BudgetInfeasible, bbdropout, random_structured
from .config import ConfigError, DatasetSpec, ExperimentConfig, desk_train_config, load_config
from .experiment import (ArmResult, ExperimentData, RunReport, aggregate, data_size_study, prepare_data,
                         run_experiment, task_adaptivity)
from .reports import emit_data_size, emit_reports, load_report

__all__ = [
    "ArmResult", "BudgetInfeasible", "ConfigError", "DatasetSpec", "ExperimentConfig", "ExperimentData",
    "RunReport", "aggregate", "bbdropout", "data_size_study", "desk_train_config", "emit_data_size",
    "emit_reports", "load_config", "load_report", "prepare_data", "random_structured", "run_experiment",
    "task_adaptivity",
]
