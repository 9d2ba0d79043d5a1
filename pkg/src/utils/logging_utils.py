#!/usr/bin/env python3
"""
Logging utility functions
"""

import logging
from typing import Optional, Sequence

import config
from models import EpochStats


# Emoji constants
EMOJI_START = "🚀"
EMOJI_STATS = "📊"
EMOJI_SUCCESS = "✅"
EMOJI_ERROR = "❌"
EMOJI_TIME = "⚡"


def setup_logger(name: str = None, level: Optional[str] = None, log_file: bool = False) -> logging.Logger:
    """
    Setup logger with consistent formatting

    Console output goes to stderr so stdout stays machine-parseable.

    Args:
        name: Logger name (root logger when None)
        level: Logging level name, defaults to config.LOG_LEVEL
        log_file: Also write DEBUG records to config.LOG_FILE

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    level_value = getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO)
    logger.setLevel(logging.DEBUG if log_file else level_value)

    # Drop handlers from a previous call only
    for handler in list(logger.handlers):
        if getattr(handler, "_warpsr", False):
            logger.removeHandler(handler)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level_value)
    console_handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
    console_handler._warpsr = True
    logger.addHandler(console_handler)

    # File handler
    if log_file:
        config.LOGS_DIR.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(config.LOG_FILE)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
        file_handler._warpsr = True
        logger.addHandler(file_handler)

    return logger


def log_run_start(what: str, details: str, logger: logging.Logger) -> None:
    """
    Log the start of a long-running stage

    Args:
        what: Stage name (training, pretraining, evaluation)
        details: Short description of the run
        logger: Logger instance to use
    """
    logger.info(f"{EMOJI_START} Starting {what}: {details}")


def log_epoch_statistics(stats: EpochStats, total_epochs: int, logger: logging.Logger) -> None:
    """
    Log epoch statistics in a consistent format

    Args:
        stats: EpochStats for the finished epoch
        total_epochs: Configured number of epochs
        logger: Logger instance to use
    """
    logger.info(
        f"{EMOJI_STATS} Epoch {stats.epoch}/{total_epochs}: "
        f"mean loss {stats.mean_loss:.6f} over {stats.samples} samples ({stats.wall_time_s:.2f}s)"
    )


def log_run_summary(what: str, history: Sequence[EpochStats], logger: logging.Logger) -> None:
    """
    Log a run summary

    Args:
        what: Stage name
        history: Per-epoch statistics
        logger: Logger instance to use
    """
    if history:
        first, last = history[0], history[-1]
        total_time = sum(stats.wall_time_s for stats in history)
        logger.info(
            f"{EMOJI_SUCCESS} {what} finished: loss {first.mean_loss:.6f} -> {last.mean_loss:.6f} "
            f"in {len(history)} epochs"
        )
        logger.info(f"{EMOJI_TIME} {what} took {total_time:.2f} seconds")
    else:
        logger.info(f"{EMOJI_ERROR} {what} ran no epochs")
