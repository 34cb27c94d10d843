"""
Logging configuration for the pGLMM toolkit.
Modules obtain their logger through get_logger(__name__); the command line
calls configure_logging() once at start-up.
"""
import logging
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
ROOT_LOGGER_NAME = "src"

HANDLER_TAG = "_pglmm_handler"


def configure_logging(level: Union[int, str] = logging.INFO,
                      log_file: Optional[Path] = None,
                      quiet: bool = False) -> logging.Logger:
    """
    Install handlers on the package root logger.

    Calling it again replaces the handlers installed by a previous call, so
    repeated CLI invocations in one process do not duplicate output.

    Args:
        level: Logging level name or number.
        log_file: Optional path of a log file to write alongside stderr.
        quiet: When True only warnings and errors are emitted.

    Returns:
        logging.Logger: The configured package root logger.
    """
    root = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in list(root.handlers):
        if getattr(handler, HANDLER_TAG, False):
            root.removeHandler(handler)
            handler.close()

    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    if quiet:
        level = max(level, logging.WARNING)

    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    setattr(stream, HANDLER_TAG, True)
    root.addHandler(stream)

    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path)
        file_handler.setFormatter(formatter)
        setattr(file_handler, HANDLER_TAG, True)
        root.addHandler(file_handler)

    root.setLevel(level)
    root.propagate = False
    return root


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """
    Get a logger for a module of the package.

    Args:
        name: Usually ``__name__`` of the calling module.

    Returns:
        logging.Logger: The standard library logger for that name.
    """
    return logging.getLogger(name or ROOT_LOGGER_NAME)
