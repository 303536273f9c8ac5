"""
Experiment configuration validation for simcache-lab
Centralized checks behind every command and HTTP endpoint
"""
import os
from typing import List, Optional, Tuple

from models import ExperimentConfig, TieBreak
from services.exceptions import ValidationError

Q_RULES = ('power', 'sim_lru', 'lru', 'table')


class ConfigValidator:
    """Centralized experiment configuration validation"""

    @staticmethod
    def validate_catalog_source(config: ExperimentConfig) -> Tuple[bool, str]:
        if (config.grid_side is None) == (config.catalog_file is None):
            return False, 'Exactly one of grid_side and catalog_file must be set'
        if config.grid_side is not None and config.grid_side < 1:
            return False, 'grid_side must be at least 1'
        return True, ''

    @staticmethod
    def validate_popularity(config: ExperimentConfig) -> Tuple[bool, str]:
        if config.popularity_file or config.popularity_trace_file:
            return True, ''
        if config.alpha <= 0:
            return False, 'alpha must be positive'
        if not config.hotspots:
            return False, 'At least one hotspot is required without a popularity file'
        return True, ''

    @staticmethod
    def validate_similarity(config: ExperimentConfig) -> Tuple[bool, str]:
        if config.threshold < 0:
            return False, 'threshold d must be nonnegative'
        if config.tie_break != 'auto' and config.tie_break not in {t.value for t in TieBreak}:
            return False, f"Unknown tie_break '{config.tie_break}'"
        if config.q_rule not in Q_RULES:
            return False, f"q_rule must be one of {', '.join(Q_RULES)}"
        if config.q_rule == 'table' and not config.q_table_file:
            return False, 'q_rule table needs q_table_file'
        if config.q_exponent < 0:
            return False, 'q_exponent must be nonnegative'
        return True, ''

    @staticmethod
    def validate_solver(config: ExperimentConfig) -> Tuple[bool, str]:
        if not config.capacities:
            return False, 'At least one capacity is required'
        if any(c <= 0 for c in config.capacities):
            return False, 'Capacities must be positive'
        if not 0 <= config.beta < 1:
            return False, 'beta must lie in [0, 1)'
        if config.beta_samples < 1:
            return False, 'beta_samples must be at least 1'
        if config.max_iterations < 1:
            return False, 'max_iterations must be at least 1'
        if config.occupancy_tol < 0 or config.tc_tol <= 0:
            return False, 'occupancy_tol must be nonnegative and tc_tol positive'
        return True, ''

    @staticmethod
    def validate_simulation(config: ExperimentConfig) -> Tuple[bool, str]:
        if config.trace_length < 1:
            return False, 'trace_length must be at least 1'
        if config.repetitions < 1:
            return False, 'repetitions must be at least 1'
        if not 0 <= config.warmup_fraction < 1:
            return False, 'warmup_fraction must lie in [0, 1)'
        if config.workers < 1:
            return False, 'workers must be at least 1'
        return True, ''

    @staticmethod
    def validate_files(config: ExperimentConfig) -> Tuple[bool, str]:
        for name in ('catalog_file', 'popularity_file', 'popularity_trace_file', 'q_table_file', 'trace_file'):
            path: Optional[str] = getattr(config, name)
            if path and not os.path.exists(path):
                return False, f"{name} does not exist: {path}"
        return True, ''

    @staticmethod
    def validate_config(config: ExperimentConfig) -> Tuple[bool, List[str]]:
        """Run every check; returns (is_valid, error messages)"""
        errors = []
        for check in (
            ConfigValidator.validate_catalog_source,
            ConfigValidator.validate_popularity,
            ConfigValidator.validate_similarity,
            ConfigValidator.validate_solver,
            ConfigValidator.validate_simulation,
            ConfigValidator.validate_files,
        ):
            is_valid, message = check(config)
            if not is_valid:
                errors.append(message)
        return not errors, errors

    @staticmethod
    def ensure_valid(config: ExperimentConfig) -> ExperimentConfig:
        is_valid, errors = ConfigValidator.validate_config(config)
        if not is_valid:
            raise ValidationError('Invalid experiment configuration', errors=errors)
        return config
