from __future__ import annotations
import logging
import os
import sys

try:
    from colorlog import ColoredFormatter
except Exception:  # plain output if colorlog is unavailable
    ColoredFormatter = None

_DEFAULT_LEVEL = os.environ.get("CURE_LOG_LEVEL", "INFO").upper()
_DEFAULT_USE_COLOR = os.environ.get("CURE_LOG_COLOR", "1").lower() in ("1", "true", "yes", "y")
_DEFAULT_FORMAT = os.environ.get(
    "CURE_LOG_FORMAT",
    "%(log_color)s%(asctime)s [%(levelname)s]%(reset)s %(message_log_color)s%(message)s%(reset)s "
    "(%(name)s)"
)
_PLAIN_FORMAT = os.environ.get(
    "CURE_LOG_PLAIN_FORMAT",
    "%(asctime)s [%(levelname)s] %(message)s (%(name)s)"
)
_DEFAULT_DATEFMT = os.environ.get("CURE_LOG_DATEFMT", "%Y-%m-%d %H:%M:%S")

_LEVELS = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARN": logging.WARNING,
    "WARNING": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
    "NOTSET": logging.NOTSET,
}

_COLORS = {
    "DEBUG":    "cyan",
    "INFO":     "white",
    "WARNING":  "yellow",
    "ERROR":    "red",
    "CRITICAL": "bold_red",
}

_ROOT = "cure_training"


def _is_tty(stream) -> bool:
    try:
        return stream.isatty()
    except Exception:
        return False


def _console_formatter() -> logging.Formatter:
    if _DEFAULT_USE_COLOR and ColoredFormatter is not None and _is_tty(sys.stdout):
        return ColoredFormatter(
            _DEFAULT_FORMAT,
            datefmt=_DEFAULT_DATEFMT,
            log_colors=_COLORS,
            secondary_log_colors={"message": _COLORS},
            reset=True,
            style="%",
        )
    return logging.Formatter(fmt=_PLAIN_FORMAT, datefmt=_DEFAULT_DATEFMT)


def get_logger(name: str = _ROOT) -> logging.Logger:
    """
    Create or fetch a configured logger. Honors CURE_LOG_LEVEL, CURE_LOG_COLOR,
    CURE_LOG_FORMAT, CURE_LOG_PLAIN_FORMAT and CURE_LOG_DATEFMT.

    Only the package root logger owns a console handler; module loggers
    (``cure_training.trainer`` ...) propagate to it, so a run log attached to
    the root sees every module.
    """
    root = logging.getLogger(_ROOT)
    if not getattr(root, "_cure_training_configured", False):
        root.setLevel(_LEVELS.get(_DEFAULT_LEVEL, logging.INFO))
        handler = logging.StreamHandler(stream=sys.stdout)
        handler.setFormatter(_console_formatter())
        root.handlers[:] = [handler]
        root.propagate = False
        root._cure_training_configured = True  # type: ignore[attr-defined]
    return logging.getLogger(name) if name != _ROOT else root


def attach_run_log(path: str | os.PathLike) -> logging.Handler:
    """
    Mirror the package log into ``path`` (plain text, no ANSI). Attaching the
    same path twice returns the existing handler.
    """
    root = get_logger(_ROOT)
    target = os.path.abspath(os.fspath(path))
    for h in root.handlers:
        if isinstance(h, logging.FileHandler) and h.baseFilename == target:
            return h
    os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
    handler = logging.FileHandler(target, encoding="utf-8")
    handler.setFormatter(logging.Formatter(fmt=_PLAIN_FORMAT, datefmt=_DEFAULT_DATEFMT))
    root.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    root = get_logger(_ROOT)
    if handler in root.handlers:
        root.removeHandler(handler)
    handler.close()
