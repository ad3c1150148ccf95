"""
Configuration Module
Environment settings, run-config layering and logging setup
"""

from config.logging_setup import configure_logging
from config.settings import (
    Config, DevelopmentConfig, ProductionConfig, TestingConfig, get_config, load_run_config
)

__all__ = [
    'Config', 'DevelopmentConfig', 'ProductionConfig', 'TestingConfig', 'get_config',
    'load_run_config', 'configure_logging',
]
