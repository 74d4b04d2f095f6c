"""Reproducible experiment suites with CSV/SVG reports."""

from __future__ import annotations

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, default_config, load_config, parse_config
from .report import ExperimentReport, ReportError, Table, Verdict, read_table, write_report
from .suites import (
    BUILTIN_PAIRS,
    RUNNERS,
    VERDICTS,
    ExperimentError,
    audit_verdicts,
    mcs_verdicts,
    run_gradient_audit,
    run_mcs_sweep,
    run_toy_training,
    run_translation_density,
    toy_verdicts,
    translation_verdicts,
)

__all__ = [
    "EXPERIMENTS",
    "BUILTIN_PAIRS",
    "RUNNERS",
    "VERDICTS",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentError",
    "ExperimentReport",
    "ReportError",
    "Table",
    "Verdict",
    "default_config",
    "load_config",
    "parse_config",
    "read_table",
    "write_report",
    "run_mcs_sweep",
    "run_translation_density",
    "run_gradient_audit",
    "run_toy_training",
    "mcs_verdicts",
    "translation_verdicts",
    "audit_verdicts",
    "toy_verdicts",
]
