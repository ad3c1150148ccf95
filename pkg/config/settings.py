"""
Application Configuration Settings
Environment defaults and the layered flat key=value run configuration
"""

import logging
import os
from typing import Dict, Iterable, Mapping, Optional

from pydantic import ValidationError

from concept_guard.errors import ConfigError
from concept_guard.schemas import RunConfig
from storage.files import PathLike, read_numbered_lines

logger = logging.getLogger(__name__)

ENV_PREFIX = 'CONCEPT_GUARD_'


class Config:
    """Base configuration class with default settings."""

    DEBUG = False
    TESTING = False

    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.environ.get('LOG_FORMAT', 'json')

    # Artifacts
    OUTPUT_DIR = os.environ.get('OUTPUT_DIR', 'runs')

    @staticmethod
    def run_defaults() -> Dict[str, str]:
        """
        Run-config values supplied by the environment.

        ``CONCEPT_GUARD_TAU_SAFE=0.1`` sets ``tau_safe``; variables naming no
        config key are ignored.
        """
        known = set(RunConfig.model_fields)
        defaults = {}
        for name, value in os.environ.items():
            if name.startswith(ENV_PREFIX):
                key = name[len(ENV_PREFIX):].lower()
                if key in known:
                    defaults[key] = value
        return defaults


class DevelopmentConfig(Config):
    """Development environment configuration."""

    DEBUG = True
    LOG_LEVEL = 'DEBUG'
    LOG_FORMAT = 'text'


class TestingConfig(Config):
    """Testing environment configuration."""

    TESTING = True
    LOG_LEVEL = 'WARNING'
    LOG_FORMAT = 'text'

    @staticmethod
    def run_defaults() -> Dict[str, str]:
        return {}


class ProductionConfig(Config):
    """Production environment configuration."""


# Configuration dictionary for easy access
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': ProductionConfig,
}


def get_config():
    """Get configuration based on environment."""
    env = os.environ.get('CONCEPT_GUARD_ENV', 'default')
    return config.get(env, config['default'])


# ============================================
# RUN CONFIGURATION LOADING
# ============================================

def _split_pair(text: str, origin: str) -> tuple:
    key, sep, value = text.partition('=')
    key, value = key.strip(), value.strip()
    if not sep or not key:
        raise ConfigError(f"{origin}: expected key=value, got {text!r}")
    return key, value


def parse_config_file(path: PathLike) -> Dict[str, str]:
    """
    Read a flat ``key=value`` file.

    Blank lines and lines starting with '#' are ignored.

    Raises:
        ConfigError: On malformed lines or duplicate keys
    """
    values: Dict[str, str] = {}
    try:
        for number, line in read_numbered_lines(path):
            text = line.strip()
            if not text or text.startswith('#'):
                continue
            key, value = _split_pair(text, f"{path}:{number}")
            if key in values:
                raise ConfigError(f"{path}:{number}: duplicate key {key!r}")
            values[key] = value
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return values


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Turn repeated ``--set key=value`` arguments into a mapping; later wins."""
    values: Dict[str, str] = {}
    for pair in pairs:
        key, value = _split_pair(pair, '--set')
        values[key] = value
    return values


def load_run_config(
    path: Optional[PathLike] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    config_class=None,
) -> RunConfig:
    """
    Resolve the run configuration.

    Layers from lowest to highest: environment defaults, config file,
    ``--set`` overrides, ``--seed``.

    Raises:
        ConfigError: On unknown keys or invalid values
    """
    config_class = config_class or get_config()
    layered: Dict[str, object] = dict(config_class.run_defaults())
    if path is not None:
        layered.update(parse_config_file(path))
    layered.update(parse_overrides(overrides))
    if seed is not None:
        layered['seed'] = seed
    try:
        resolved = RunConfig(**layered)
    except ValidationError as e:
        problems = '; '.join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None
    return resolved


def echo_config(run_config: RunConfig, log: Optional[logging.Logger] = None) -> Mapping[str, object]:
    """Log every resolved value and return them as a plain mapping."""
    log = log or logger
    values = run_config.model_dump(mode='json')
    for key in sorted(values):
        log.info(f"config {key}={values[key]}")
    return values
