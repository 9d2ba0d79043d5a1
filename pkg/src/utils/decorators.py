#!/usr/bin/env python3
"""
Decorator utilities for WarpSR
"""

import functools
import logging
import sys
from typing import Callable, Any

from constants import ExitCodes
from exceptions import (
    ConfigError,
    GradcheckFailure,
    NonFiniteError,
    UsageError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)


def with_error_handling(
    default_return: Any = None,
    log_errors: bool = True,
    reraise: bool = False
) -> Callable:
    """
    Decorator for consistent error handling

    Args:
        default_return: Value to return on error
        log_errors: Whether to log errors
        reraise: Whether to reraise exceptions
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except Exception as e:
                if log_errors:
                    logger.warning(f"⚠️ {func.__name__}: {e}")
                if reraise:
                    raise
                return default_return

        return wrapper

    return decorator


# Order matters: subclasses of OSError/ValueError are listed before their bases
EXIT_CODE_MAP = (
    (GradcheckFailure, ExitCodes.GRADCHECK),
    (NonFiniteError, ExitCodes.NUMERIC),
    (UsageError, ExitCodes.USAGE),
    (ConfigError, ExitCodes.USAGE),
    (VersionMismatchError, ExitCodes.IO),
    (OSError, ExitCodes.IO),
    (ValueError, ExitCodes.USAGE),
    (KeyError, ExitCodes.USAGE),
)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit-code taxonomy"""
    for error_type, code in EXIT_CODE_MAP:
        if isinstance(error, error_type):
            return code
    return ExitCodes.IO


def cli_command(func: Callable[..., int]) -> Callable[..., int]:
    """
    Wrap a CLI subcommand handler so that failures become exit codes

    The message goes to stderr through the logger; stdout stays clean.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except Exception as e:
            code = exit_code_for(e)
            logger.error(f"❌ {func.__name__} failed: {e}")
            print(f"error: {e}", file=sys.stderr)
            return code

    return wrapper
