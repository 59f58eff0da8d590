"""Logging setup for darkformer."""

import logging
import os
import time
from typing import Any

# Custom TRACE level, more verbose than DEBUG. Used for per-layer tensor shapes.
TRACE = 5
logging.addLevelName(TRACE, "TRACE")


def trace(self: logging.Logger, message: str, *args: Any, **kwargs: Any) -> None:
    """Log a message with severity 'TRACE'."""
    if self.isEnabledFor(TRACE):
        self._log(TRACE, message, args, **kwargs)


logging.Logger.trace = trace  # type: ignore[attr-defined]

# Record program start time for elapsed time logging
_program_start_time = time.time()

_LEVELS = {
    "trace": TRACE,
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


class ElapsedTimeFormatter(logging.Formatter):
    """Formatter that shows elapsed milliseconds from program start."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record with elapsed milliseconds from program start."""
        elapsed_ms = (record.created - _program_start_time) * 1000
        record.elapsed_ms = f"{elapsed_ms:8.1f}ms"
        return super().format(record)


def configure_logging(log_level: str | None = None) -> None:
    """Configure the root logger with elapsed time formatting.

    Called automatically when darkformer is imported, using the DKTF_LOG_LEVEL
    environment variable. Call it again to change the level at runtime.

    Parameters:
    -----------
        log_level : str | None
            One of 'trace', 'debug', 'info', 'warning', 'error'.
            If None, reads DKTF_LOG_LEVEL. Unknown values fall back to 'warning'.
    """
    if log_level is None:
        log_level = os.getenv("DKTF_LOG_LEVEL", "warning")
    root_logger = logging.getLogger()
    root_logger.setLevel(_LEVELS.get(log_level.lower(), logging.WARNING))

    if not root_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(ElapsedTimeFormatter("[%(elapsed_ms)s] %(levelname)-5s %(name)s: %(message)s"))
        root_logger.addHandler(handler)


def verbosity_to_level(verbose: int) -> str:
    """Map a count of -v flags to a log level name.

    Parameters:
    -----------
        verbose : int
            Number of times -v was given.

    Returns:
    --------
        str:
            'warning' for 0, 'info' for 1, 'debug' for 2, 'trace' beyond.
    """
    return ("warning", "info", "debug", "trace")[min(verbose, 3)]
