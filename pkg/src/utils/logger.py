"""
Logger Setup
Sets up logging configuration for the lossflow package.
"""

import logging
import os
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(name: str, level: Optional[Union[int, str]] = None) -> logging.Logger:
    """Set up a logger with the given name."""
    logger = logging.getLogger(name)
    logger.setLevel(level or os.getenv('LOSSFLOW_LOG_LEVEL', 'INFO').upper())

    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)

    return logger


def configure_logging(level: Union[int, str] = 'INFO', log_file: Optional[Path] = None) -> None:
    """
    Configure the package-wide logger used by the CLI.

    Args:
        level: Log level name or number
        log_file: Optional file that receives a copy of every record
    """
    root = logging.getLogger('src')
    root.setLevel(level.upper() if isinstance(level, str) else level)

    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)

    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)
