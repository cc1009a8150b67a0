"""
Logging setup for command-line runs.
"""

import logging
import os
from typing import Optional, Union

from rich.console import Console
from rich.logging import RichHandler

LEVEL_VARIABLE = 'ZEROSHOTNMT_LOG_LEVEL'
DEFAULT_LEVEL = 'INFO'


def resolve_level(level: Optional[Union[str, int]] = None) -> int:
    """
    Explicit level, else `ZEROSHOTNMT_LOG_LEVEL`, else INFO.
    """

    if level is None:
        level = os.getenv(LEVEL_VARIABLE, DEFAULT_LEVEL)
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(str(level).upper())
    if not isinstance(resolved, int):
        raise ValueError(f'unknown log level {level!r}')
    return resolved


def configure_logging(level: Optional[Union[str, int]] = None, console: Optional[Console] = None) -> logging.Logger:
    """
    Route the package logger through a single rich handler on stderr.
    """

    logger = logging.getLogger('zeroshotnmt')
    logger.setLevel(resolve_level(level))
    for handler in list(logger.handlers):
        if isinstance(handler, RichHandler):
            logger.removeHandler(handler)
    handler = RichHandler(console=console or Console(stderr=True), show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter('%(name)s: %(message)s'))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
