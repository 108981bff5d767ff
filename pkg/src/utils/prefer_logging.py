#!/usr/bin/env python3
"""
PREFER Logging Setup
Rotating file log plus console output under the 'prefer' logger
"""

import logging
from logging.handlers import RotatingFileHandler

LOGGER_NAME = 'prefer'
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(config=None, console: bool = True) -> logging.Logger:
    """
    Configure rotating file logging and console output.

    Calling it again replaces the handlers instead of stacking them.

    Args:
        config: PreferConfig with the log_* settings (defaults when None)
        console (bool): Attach a console handler

    Returns:
        logging.Logger: The 'prefer' logger every module logs under
    """
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    level = getattr(logging, str(getattr(config, 'log_level', 'INFO')).upper(), logging.INFO)
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    if config is not None and config.log_enabled:
        handler = RotatingFileHandler(
            config.log_file_path,
            maxBytes=config.log_max_file_size_mb * 1024 * 1024,
            backupCount=config.log_rotation_count,
            encoding='utf-8',
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    # Console handler for immediate feedback
    if console:
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    return logger
