"""
Utils package for WarpSR
"""

from .logging_utils import log_epoch_statistics, log_run_start, log_run_summary, setup_logger
from .decorators import cli_command, exit_code_for, with_error_handling

__all__ = [
    'log_epoch_statistics',
    'log_run_start',
    'log_run_summary',
    'setup_logger',
    'cli_command',
    'exit_code_for',
    'with_error_handling'
]
