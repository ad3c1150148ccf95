"""
Logging Setup
Root logger configuration with plain-text or JSON output
"""

import logging
import sys
from typing import Optional, TextIO

from pythonjsonlogger import jsonlogger

TEXT_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
JSON_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'


def configure_logging(level: str = 'INFO', fmt: str = 'json',
                      stream: Optional[TextIO] = None) -> logging.Handler:
    """
    Install a single stream handler on the root logger.

    Args:
        level: Level name such as 'INFO'
        fmt: 'json' for python-json-logger records, anything else for text
        stream: Destination, standard error by default

    Returns:
        The installed handler
    """
    handler = logging.StreamHandler(stream or sys.stderr)
    if fmt == 'json':
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    return handler
