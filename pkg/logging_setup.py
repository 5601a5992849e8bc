"""
logging_setup.py
----------------
Root-logger setup for every command: a detailed log file, a short console
format on standard error, and a flag recording whether any ERROR was
logged (the CLI turns it into exit status 2).

Python warnings (optimizer and numerical warnings from scipy/numpy) are
routed into the same handlers.
"""

import getpass
import logging
import sys
import threading
from pathlib import Path

error_occurred = threading.Event()

# Third-party loggers that are chatty at DEBUG
QUIET_LOGGERS = ("PIL", "matplotlib")


class ErrorFlagHandler(logging.Handler):
    """Sets the error flag on any record at ERROR or above."""

    def emit(self, record):
        if record.levelno >= logging.ERROR:
            error_occurred.set()


def log_file_name() -> str:
    try:
        username = getpass.getuser()
    except Exception:
        username = "unknown"
    return f"{username}_harmony.log"


def setup_logging(log_dir: Path, debug_mode: bool = False) -> Path:
    """
    Configure the root logger and return the log file path.

    The log directory must stay outside run output folders: log lines carry
    timestamps and would break byte-identical reruns.
    """
    log_dir = Path(log_dir)
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"Warning: Could not create log directory {log_dir}: {e}", file=sys.stderr)
        log_dir = Path.cwd()
    log_file = log_dir / log_file_name()

    root = logging.getLogger()
    for handler in root.handlers[:]:
        root.removeHandler(handler)
        handler.close()

    level = logging.DEBUG if debug_mode else logging.INFO

    try:
        file_handler = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s [%(levelname)s] %(module)s - %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
        ))
        root.addHandler(file_handler)
    except OSError as e:
        print(f"Warning: Could not create log file handler: {e}", file=sys.stderr)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s", datefmt="%H:%M:%S"))
    root.addHandler(console)
    root.addHandler(ErrorFlagHandler())
    root.setLevel(level)

    logging.captureWarnings(True)
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    logging.info("=" * 60)
    logging.info("Target-Free Harmonizer - Starting")
    logging.info(f"Log file: {log_file}")
    logging.info(f"Log level: {logging.getLevelName(level)}")
    logging.info("=" * 60)
    return log_file


def has_errors() -> bool:
    return error_occurred.is_set()


def reset_error_flag():
    """Clear the flag (between runs in one process, and in tests)."""
    error_occurred.clear()
